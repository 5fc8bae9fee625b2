"""Loop kernels that numpy cannot express in a single pass."""
import numba


@numba.njit(cache=True)
def maxpool_forward(x, pt, pf, out, arg):
    b, c = x.shape[0], x.shape[1]
    ot, of = out.shape[2], out.shape[3]
    for i in range(b):
        for j in range(c):
            for u in range(ot):
                for v in range(of):
                    best = x[i, j, u * pt, v * pf]
                    pos = 0
                    for p in range(pt):
                        for q in range(pf):
                            val = x[i, j, u * pt + p, v * pf + q]
                            if val > best:
                                best = val
                                pos = p * pf + q
                    out[i, j, u, v] = best
                    arg[i, j, u, v] = pos


@numba.njit(cache=True)
def maxpool_backward(grad, arg, pt, pf, dx):
    b, c, ot, of = grad.shape
    for i in range(b):
        for j in range(c):
            for u in range(ot):
                for v in range(of):
                    pos = arg[i, j, u, v]
                    dx[i, j, u * pt + pos // pf, v * pf + pos % pf] += grad[i, j, u, v]


@numba.njit(cache=True)
def col2im_add(dcols, dxp):
    # dcols: (b, ot, of, c, kt, kf); dxp: (b, c, ot + kt - 1, of + kf - 1)
    b, ot, of, c, kt, kf = dcols.shape
    for i in range(b):
        for u in range(ot):
            for v in range(of):
                for j in range(c):
                    for p in range(kt):
                        for q in range(kf):
                            dxp[i, j, u + p, v + q] += dcols[i, u, v, j, p, q]
