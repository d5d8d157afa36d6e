"""Pure numpy fallback for the ensemble CTM kernel.

Must stay numerically identical (to round-off) with ``_ctm_ext.pyx``.
"""

import numpy as np


def ctm_step_counts(n, v, rho_cr, rho_j, dx, dt, inflow, offramp_cell,
                    split, open_downstream, clamp, ramp_cap=np.inf):
    """Advance vehicle counts ``n`` (cells x members) by one time step.

    ``inflow`` is the boundary demand in vehicles per step. ``offramp_cell``
    is -1 when the corridor has no diverge; ``ramp_cap`` bounds the off-ramp
    share in vehicles per step (FIFO diverge). Returns ``(new_counts, boundary)``
    where ``boundary`` rows hold vehicles entered, taken by the off-ramp and
    discharged downstream during the step.
    """
    n = np.asarray(n, dtype=np.float64)
    squeeze = n.ndim == 1
    if squeeze:
        n = n[:, None]
    k = n.shape[0]

    v = v[:, None]
    rho_cr = rho_cr[:, None]
    rho_j = rho_j[:, None]
    w = v * rho_cr / (rho_j - rho_cr)

    send = (v * dt / dx) * n
    recv = (w * dt / dx) * (rho_j * dx - n)
    if clamp:
        cap = v * rho_cr * dt
        send = np.minimum(send, cap)
        recv = np.minimum(recv, cap)
    recv = np.maximum(recv, 0.0)
    send = np.maximum(send, 0.0)

    # out_flow[i]: vehicles leaving cell i; in_flow[i]: vehicles entering it
    out_flow = np.empty_like(n)
    in_flow = np.empty_like(n)
    in_flow[0] = np.minimum(inflow, recv[0])
    if k > 1:
        out_flow[:-1] = np.minimum(send[:-1], recv[1:])
        in_flow[1:] = out_flow[:-1]
    if 0 <= offramp_cell < k - 1 and split > 0.0:
        o = offramp_cell
        if split < 1.0:
            total = np.minimum(send[o], recv[o + 1] / (1.0 - split))
        else:
            total = send[o]
        total = np.minimum(total, ramp_cap / split)
        out_flow[o] = total
        in_flow[o + 1] = (1.0 - split) * total
    out_flow[k - 1] = send[k - 1] if open_downstream else 0.0

    boundary = np.zeros((3, n.shape[1]))
    boundary[0] = in_flow[0]
    boundary[2] = out_flow[k - 1]
    if 0 <= offramp_cell < k - 1 and split > 0.0:
        boundary[1] = out_flow[offramp_cell] - in_flow[offramp_cell + 1]

    new = n + in_flow - out_flow
    # round-off can leave tiny negatives or overshoot jam
    np.clip(new, 0.0, rho_j * dx, out=new)
    if squeeze:
        return new[:, 0], boundary[:, 0]
    return new, boundary
