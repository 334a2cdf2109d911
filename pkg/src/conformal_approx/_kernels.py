"""Numba kernels: Dijkstra on implicit lattices and CSR graphs, segment rasterization.

All searches use a lazy binary heap ordered by (distance, node id) and break
predecessor ties towards the smallest node index, so results are reproducible.
Buffers (dist, pred, root, touched, tflag) are owned by the caller; every kernel
leaves them dirty only on the entries listed in ``touched[:n]``.
"""
import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True, inline="always")
def _less(ka, va, kb, vb):
    return ka < kb or (ka == kb and va < vb)


@njit(cache=True, inline="always")
def _heap_push(hk, hv, size, key, val):
    if size == hk.shape[0]:
        nk = np.empty(2 * size, np.float64)
        nv = np.empty(2 * size, np.int64)
        nk[:size] = hk
        nv[:size] = hv
        hk = nk
        hv = nv
    i = size
    while i > 0:
        p = (i - 1) >> 1
        if _less(key, val, hk[p], hv[p]):
            hk[i] = hk[p]
            hv[i] = hv[p]
            i = p
        else:
            break
    hk[i] = key
    hv[i] = val
    return hk, hv, size + 1


@njit(cache=True, inline="always")
def _heap_pop(hk, hv, size):
    key = hk[0]
    val = hv[0]
    size -= 1
    lk = hk[size]
    lv = hv[size]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= size:
            break
        if c + 1 < size and _less(hk[c + 1], hv[c + 1], hk[c], hv[c]):
            c += 1
        if _less(hk[c], hv[c], lk, lv):
            hk[i] = hk[c]
            hv[i] = hv[c]
            i = c
        else:
            break
    hk[i] = lk
    hv[i] = lv
    return key, val, size


@njit(cache=True)
def lattice_search(shape, offsets, half, forward, W, sources, targets, limit,
                   dist, pred, root, touched, tflag):
    """Multi-source Dijkstra on a box lattice with stencil ``offsets``.

    The weight of the step p -> p + offsets[k] is ``W[half[k], p]`` when
    ``forward[k]`` and ``W[half[k], p + offsets[k]]`` otherwise, so both
    directions read the same stored value. Stops once every target is settled
    (all nodes when ``targets`` is empty). Returns the number of touched nodes.
    """
    d = shape.shape[0]
    K = offsets.shape[0]
    strides = np.empty(d, np.int64)
    s = 1
    for a in range(d - 1, -1, -1):
        strides[a] = s
        s *= shape[a]
    flat = np.zeros(K, np.int64)
    for k in range(K):
        for a in range(d):
            flat[k] += offsets[k, a] * strides[a]

    hk = np.empty(1024, np.float64)
    hv = np.empty(1024, np.int64)
    hs = 0
    nt = 0
    for i in range(sources.shape[0]):
        v = sources[i]
        if dist[v] == INF:
            touched[nt] = v
            nt += 1
        if dist[v] != 0.0:
            dist[v] = 0.0
            pred[v] = -1
            root[v] = v
            hk, hv, hs = _heap_push(hk, hv, hs, 0.0, v)
    remaining = 0
    for i in range(targets.shape[0]):
        t = targets[i]
        if tflag[t] == 0:
            tflag[t] = 1
            remaining += 1
    full = targets.shape[0] == 0
    coord = np.empty(d, np.int64)

    while hs > 0:
        key, v, hs = _heap_pop(hk, hv, hs)
        if key > dist[v]:
            continue
        if not full and tflag[v] == 1:
            tflag[v] = 2
            remaining -= 1
            if remaining == 0:
                break
        rem = v
        for a in range(d):
            coord[a] = rem // strides[a]
            rem -= coord[a] * strides[a]
        for k in range(K):
            ok = True
            for a in range(d):
                c = coord[a] + offsets[k, a]
                if c < 0 or c >= shape[a]:
                    ok = False
                    break
            if not ok:
                continue
            q = v + flat[k]
            if forward[k]:
                w = W[half[k], v]
            else:
                w = W[half[k], q]
            nd = key + w
            if nd > limit:
                continue
            dq = dist[q]
            if nd < dq:
                if dq == INF:
                    touched[nt] = q
                    nt += 1
                dist[q] = nd
                pred[q] = v
                root[q] = root[v]
                hk, hv, hs = _heap_push(hk, hv, hs, nd, q)
            elif nd == dq and v < pred[q]:
                pred[q] = v
                root[q] = root[v]
    return nt


@njit(cache=True)
def reset_buffers(dist, pred, root, tflag, touched, nt):
    for i in range(nt):
        t = touched[i]
        dist[t] = INF
        pred[t] = -1
        root[t] = -1
        tflag[t] = 0


@njit(cache=True)
def lattice_pair_dists(shape, offsets, half, forward, W, us, vs, limits,
                       dist, pred, root, touched, tflag):
    """Distance for each pair (us[i], vs[i]); inf when beyond limits[i]."""
    n = us.shape[0]
    out = np.empty(n, np.float64)
    src = np.empty(1, np.int64)
    tgt = np.empty(1, np.int64)
    for i in range(n):
        src[0] = us[i]
        tgt[0] = vs[i]
        nt = lattice_search(shape, offsets, half, forward, W, src, tgt, limits[i],
                            dist, pred, root, touched, tflag)
        out[i] = dist[vs[i]]
        reset_buffers(dist, pred, root, tflag, touched, nt)
        # targets that were never reached keep tflag set; clear explicitly
        tflag[vs[i]] = 0
    return out


@njit(cache=True)
def csr_search(indptr, indices, weights, sources, targets, limit,
               dist, pred, touched, tflag):
    hk = np.empty(1024, np.float64)
    hv = np.empty(1024, np.int64)
    hs = 0
    nt = 0
    for i in range(sources.shape[0]):
        v = sources[i]
        if dist[v] == INF:
            touched[nt] = v
            nt += 1
        dist[v] = 0.0
        pred[v] = -1
        hk, hv, hs = _heap_push(hk, hv, hs, 0.0, v)
    remaining = 0
    for i in range(targets.shape[0]):
        t = targets[i]
        if tflag[t] == 0:
            tflag[t] = 1
            remaining += 1
    full = targets.shape[0] == 0
    while hs > 0:
        key, v, hs = _heap_pop(hk, hv, hs)
        if key > dist[v]:
            continue
        if not full and tflag[v] == 1:
            tflag[v] = 2
            remaining -= 1
            if remaining == 0:
                break
        for j in range(indptr[v], indptr[v + 1]):
            q = indices[j]
            nd = key + weights[j]
            if nd > limit:
                continue
            if nd < dist[q]:
                if dist[q] == INF:
                    touched[nt] = q
                    nt += 1
                dist[q] = nd
                pred[q] = v
                hk, hv, hs = _heap_push(hk, hv, hs, nd, q)
            elif nd == dist[q] and v < pred[q]:
                pred[q] = v
    return nt


@njit(cache=True)
def csr_pair_dists(indptr, indices, weights, us, vs, limits, dist, pred, touched, tflag):
    n = us.shape[0]
    out = np.empty(n, np.float64)
    src = np.empty(1, np.int64)
    tgt = np.empty(1, np.int64)
    for i in range(n):
        src[0] = us[i]
        tgt[0] = vs[i]
        nt = csr_search(indptr, indices, weights, src, tgt, limits[i],
                        dist, pred, touched, tflag)
        out[i] = dist[vs[i]]
        for j in range(nt):
            t = touched[j]
            dist[t] = INF
            pred[t] = -1
            tflag[t] = 0
        tflag[vs[i]] = 0
    return out


@njit(cache=True, inline="always")
def _seg_dist(p, a, b):
    d = p.shape[0]
    ab2 = 0.0
    t = 0.0
    for k in range(d):
        ab = b[k] - a[k]
        ab2 += ab * ab
        t += (p[k] - a[k]) * ab
    if ab2 > 0.0:
        t /= ab2
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    s = 0.0
    for k in range(d):
        c = a[k] + t * (b[k] - a[k]) - p[k]
        s += c * c
    return np.sqrt(s)


@njit(cache=True)
def rasterize_nearest(shape, lo, h, seg_a, seg_b, cutoff, r, nearest, end_dist):
    """Per lattice node: min distance to the segments (clipped at cutoff),
    nearest segment id (smallest id on ties) and distance to its endpoints."""
    d = shape.shape[0]
    E = seg_a.shape[0]
    p = np.empty(d, np.float64)
    lo_i = np.empty(d, np.int64)
    hi_i = np.empty(d, np.int64)
    idx = np.empty(d, np.int64)
    strides = np.empty(d, np.int64)
    s = 1
    for a in range(d - 1, -1, -1):
        strides[a] = s
        s *= shape[a]
    for e in range(E):
        for a in range(d):
            mn = min(seg_a[e, a], seg_b[e, a]) - cutoff
            mx = max(seg_a[e, a], seg_b[e, a]) + cutoff
            lo_i[a] = max(0, int(np.ceil((mn - lo[a]) / h)))
            hi_i[a] = min(shape[a] - 1, int(np.floor((mx - lo[a]) / h)))
        if d == 2:
            for i in range(lo_i[0], hi_i[0] + 1):
                for j in range(lo_i[1], hi_i[1] + 1):
                    p[0] = lo[0] + i * h
                    p[1] = lo[1] + j * h
                    dd = _seg_dist(p, seg_a[e], seg_b[e])
                    n = i * strides[0] + j
                    if dd < r[n] or (dd == r[n] and nearest[n] >= 0 and e < nearest[n]):
                        r[n] = dd
                        nearest[n] = e
        else:
            for i in range(lo_i[0], hi_i[0] + 1):
                for j in range(lo_i[1], hi_i[1] + 1):
                    for k in range(lo_i[2], hi_i[2] + 1):
                        p[0] = lo[0] + i * h
                        p[1] = lo[1] + j * h
                        p[2] = lo[2] + k * h
                        dd = _seg_dist(p, seg_a[e], seg_b[e])
                        n = i * strides[0] + j * strides[1] + k
                        if dd < r[n] or (dd == r[n] and nearest[n] >= 0 and e < nearest[n]):
                            r[n] = dd
                            nearest[n] = e
    # endpoint distances of the nearest segment
    N = r.shape[0]
    for n in range(N):
        e = nearest[n]
        if e < 0:
            end_dist[n] = np.inf
            continue
        rem = n
        for a in range(d):
            idx[a] = rem // strides[a]
            rem -= idx[a] * strides[a]
            p[a] = lo[a] + idx[a] * h
        da = 0.0
        db = 0.0
        for a in range(d):
            da += (p[a] - seg_a[e, a]) ** 2
            db += (p[a] - seg_b[e, a]) ** 2
        end_dist[n] = np.sqrt(min(da, db))


@njit(cache=True, inline="always")
def smoothstep(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return t * t * (3.0 - 2.0 * t)


@njit(cache=True)
def rasterize_blend(shape, lo, h, seg_a, seg_b, values, cutoff, blend, r, num, den):
    """Accumulate smooth nearest-edge weights: omega = 1 - s((r_e - r) / blend)."""
    d = shape.shape[0]
    E = seg_a.shape[0]
    p = np.empty(d, np.float64)
    lo_i = np.empty(d, np.int64)
    hi_i = np.empty(d, np.int64)
    strides = np.empty(d, np.int64)
    s = 1
    for a in range(d - 1, -1, -1):
        strides[a] = s
        s *= shape[a]
    # an edge up to `blend` beyond the nearest one still carries weight
    reach = cutoff + blend
    for e in range(E):
        for a in range(d):
            mn = min(seg_a[e, a], seg_b[e, a]) - reach
            mx = max(seg_a[e, a], seg_b[e, a]) + reach
            lo_i[a] = max(0, int(np.ceil((mn - lo[a]) / h)))
            hi_i[a] = min(shape[a] - 1, int(np.floor((mx - lo[a]) / h)))
        ve = values[e]
        if d == 2:
            for i in range(lo_i[0], hi_i[0] + 1):
                for j in range(lo_i[1], hi_i[1] + 1):
                    n = i * strides[0] + j
                    if r[n] >= cutoff:
                        continue
                    p[0] = lo[0] + i * h
                    p[1] = lo[1] + j * h
                    dd = _seg_dist(p, seg_a[e], seg_b[e])
                    om = 1.0 - smoothstep((dd - r[n]) / blend)
                    if om > 0.0:
                        num[n] += om * ve
                        den[n] += om
        else:
            for i in range(lo_i[0], hi_i[0] + 1):
                for j in range(lo_i[1], hi_i[1] + 1):
                    for k in range(lo_i[2], hi_i[2] + 1):
                        n = i * strides[0] + j * strides[1] + k
                        if r[n] >= cutoff:
                            continue
                        p[0] = lo[0] + i * h
                        p[1] = lo[1] + j * h
                        p[2] = lo[2] + k * h
                        dd = _seg_dist(p, seg_a[e], seg_b[e])
                        om = 1.0 - smoothstep((dd - r[n]) / blend)
                        if om > 0.0:
                            num[n] += om * ve
                            den[n] += om


@njit(cache=True)
def points_to_segments(points, seg_a, seg_b, bin_lo, bin_size, bin_shape,
                       bin_ptr, bin_items, reach):
    """Exact nearest-segment distance for arbitrary points using a bin index.

    Segments are registered in every bin their cutoff-inflated box touches;
    points farther than ``reach`` from every segment get inf / -1.
    """
    n, d = points.shape
    r = np.full(n, np.inf)
    nearest = np.full(n, -1, np.int64)
    strides = np.empty(d, np.int64)
    s = 1
    for a in range(d - 1, -1, -1):
        strides[a] = s
        s *= bin_shape[a]
    for i in range(n):
        b = 0
        inside = True
        for a in range(d):
            c = int(np.floor((points[i, a] - bin_lo[a]) / bin_size))
            if c < 0 or c >= bin_shape[a]:
                inside = False
                break
            b += c * strides[a]
        if not inside:
            continue
        for j in range(bin_ptr[b], bin_ptr[b + 1]):
            e = bin_items[j]
            dd = _seg_dist(points[i], seg_a[e], seg_b[e])
            if dd <= reach and (dd < r[i] or (dd == r[i] and e < nearest[i])):
                r[i] = dd
                nearest[i] = e
    return r, nearest


@njit(cache=True)
def segment_pair_dists(A0, A1, B0, B1, I, J):
    """Minimum distance between segments A0[I]-A1[I] and B0[J]-B1[J], pairwise."""
    n = I.shape[0]
    d = A0.shape[1]
    out = np.empty(n, np.float64)
    d1 = np.empty(d, np.float64)
    d2 = np.empty(d, np.float64)
    rr = np.empty(d, np.float64)
    for k in range(n):
        i = I[k]
        j = J[k]
        a = 0.0
        e = 0.0
        f = 0.0
        c = 0.0
        b = 0.0
        for t in range(d):
            d1[t] = A1[i, t] - A0[i, t]
            d2[t] = B1[j, t] - B0[j, t]
            rr[t] = A0[i, t] - B0[j, t]
            a += d1[t] * d1[t]
            e += d2[t] * d2[t]
            f += d2[t] * rr[t]
            c += d1[t] * rr[t]
            b += d1[t] * d2[t]
        if a <= 0.0 and e <= 0.0:
            s = 0.0
            u = 0.0
        elif a <= 0.0:
            s = 0.0
            u = min(max(f / e, 0.0), 1.0)
        elif e <= 0.0:
            u = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            den = a * e - b * b
            if den > 0.0:
                s = min(max((b * f - c * e) / den, 0.0), 1.0)
            else:
                s = 0.0
            u = (b * s + f) / e
            if u < 0.0:
                u = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif u > 1.0:
                u = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
        acc = 0.0
        for t in range(d):
            x = rr[t] + s * d1[t] - u * d2[t]
            acc += x * x
        out[k] = np.sqrt(acc)
    return out
