"""Compiled per-tick inner loops of the simulator.

The reference (numpy) versions of the same rules live in ``sim_engine``
(``dispatch_times``, ``network_step``); tests check the two agree.
"""
from __future__ import annotations

import numpy as np
from numba import njit

EPS = 1e-9
LAB_M, LAB_H, LAB_O = 0, 1, 2
SERVED, REJECTED = 1, 2
# fates, mirrored in sim_engine
QUEUED, POLICY, NET_DROP, RANDOM_LOSS, LATE, RECEIVED = 1, 2, 3, 4, 5, 6
# stats slots
ST_POLICY, ST_I_POLICY, ST_I_OVER, ST_I_OVER_OPT, ST_PLANNED = range(5)


@njit(cache=True)
def serve_queue(srv, rel, dl, lab, gkey, rate, free, t0, t1, feedback, kframes, o_seen, o_rejected, status, done):
    """Serve the queue of every server for one tick, in the given order.

    Frames must be grouped by server. ``status`` is set to 1 for frames sent
    (with completion time in ``done``) and 2 for frames rejected by the
    send/reject rule; ``free`` and ``o_rejected`` are updated in place.
    """
    n = len(srv)
    a = 0
    while a < n:
        s = srv[a]
        b = a
        while b < n and srv[b] == s:
            b += 1
        r = rate[s]
        if r > 0:
            gap = 1.0 / r
            start = max(free[s], t0)
            t = start
            cut = False
            sent = 0
            for j in range(a, b):
                fin = max(t, rel[j]) + gap
                if feedback and fin > dl[j] + EPS:
                    if lab[j] == LAB_O:
                        status[j] = REJECTED
                        o_rejected[gkey[j]] += 1
                        continue
                    if lab[j] == LAB_H and o_rejected[gkey[j]] >= o_seen[gkey[j]]:
                        status[j] = REJECTED
                        continue
                if fin > t1 + EPS:
                    cut = True
                    break
                status[j] = SERVED
                done[j] = fin
                t = fin
                sent += 1
            if kframes and cut:
                # capacity ran out: keep the slots, give them to the most critical frames
                cand = np.empty(b - a, dtype=np.int64)
                m = 0
                for j in range(a, b):
                    if status[j] != REJECTED:
                        status[j] = 0
                        cand[m] = j
                        m += 1
                cand = cand[:m]
                keys = np.empty(m)
                for x in range(m):
                    keys[x] = lab[cand[x]]
                pick = np.argsort(keys, kind="mergesort")[:sent]
                chosen = np.sort(cand[pick])
                t = start
                for j in chosen:
                    fin = max(t, rel[j]) + gap
                    if fin > t1 + EPS:
                        break
                    status[j] = SERVED
                    done[j] = fin
                    t = fin
            if t > free[s]:
                free[s] = t
        a = b


@njit(cache=True)
def merge_runs(key, gid, run_s, run_e, run_srv, n_srv):
    """Order grouped by server, then by ``(key, gid)``.

    ``[run_s[r], run_e[r])`` are runs of frames of server ``run_srv[r]``, each
    already sorted; a server only has a handful of runs, so a linear scan
    over their heads beats a general sort.
    """
    nr = len(run_s)
    n = 0
    cnt = np.zeros(n_srv + 1, dtype=np.int64)
    for r in range(nr):
        cnt[run_srv[r] + 1] += 1
        n += run_e[r] - run_s[r]
    for s in range(n_srv):
        cnt[s + 1] += cnt[s]
    pos = cnt[:n_srv].copy()
    runs = np.empty(nr, dtype=np.int64)
    for r in range(nr):
        runs[pos[run_srv[r]]] = r
        pos[run_srv[r]] += 1
    order = np.empty(n, dtype=np.int64)
    head = run_s.copy()
    w = 0
    for s in range(n_srv):
        a, b = cnt[s], cnt[s + 1]
        while True:
            best = -1
            for x in range(a, b):
                r = runs[x]
                h = head[r]
                if h < run_e[r]:
                    if best < 0:
                        best = r
                    else:
                        hb = head[best]
                        if key[h] < key[hb] or (key[h] == key[hb] and gid[h] < gid[hb]):
                            best = r
            if best < 0:
                break
            order[w] = head[best]
            head[best] += 1
            w += 1
    return order


@njit(cache=True)
def server_tick(t0, t1, act, s_start, s_rate, s_next, s_server, s_level, s_kept,
                nf, gop_len, nb_gop, labels, drop_mask, kframes, feedback, slack_mult,
                o_seen, o_rejected, srv_rate, srv_free,
                q_gid, q_srv, q_rel, q_dl, q_lab, q_gkey, q_sess,
                fate, fate_time, served, waited, stats):
    """Release due frames, then serve every server queue for ``[t0, t1)``.

    Returns the new queue arrays followed by the sent frames
    ``(gid, done, dl, lab, sess)`` ordered by completion time.
    """
    # release
    total = 0
    hi = np.empty(len(act), dtype=np.int64)
    for x in range(len(act)):
        i = act[x]
        h = int(np.ceil((t1 - s_start[i]) * s_rate[i] - EPS))
        h = min(max(h, s_next[i]), nf)
        hi[x] = h
        total += h - s_next[i]
    nq = len(q_gid)
    n = nq + total
    gid = np.empty(n, dtype=np.int64)
    srv = np.empty(n, dtype=np.int64)
    rel = np.empty(n)
    dl = np.empty(n)
    lab = np.empty(n, dtype=np.int8)
    gkey = np.empty(n, dtype=np.int64)
    sess = np.empty(n, dtype=np.int64)
    gid[:nq] = q_gid
    srv[:nq] = q_srv
    rel[:nq] = q_rel
    dl[:nq] = q_dl
    lab[:nq] = q_lab
    gkey[:nq] = q_gkey
    sess[:nq] = q_sess
    # sorted runs: the carried-over queue per server, then one per stream
    run_s = np.empty(nq + len(act), dtype=np.int64)
    run_e = np.empty(nq + len(act), dtype=np.int64)
    run_srv = np.empty(nq + len(act), dtype=np.int64)
    nr = 0
    for j in range(nq):
        if j == 0 or q_srv[j] != q_srv[j - 1]:
            if nr > 0:
                run_e[nr - 1] = j
            run_s[nr] = j
            run_srv[nr] = q_srv[j]
            nr += 1
    if nr > 0:
        run_e[nr - 1] = nq
    q = nq
    for x in range(len(act)):
        i = act[x]
        run_s[nr] = q
        run_srv[nr] = s_server[i]
        for idx in range(s_next[i], hi[x]):
            gop = idx // gop_len
            pos = idx - gop * gop_len
            g = i * nb_gop + gop
            r = s_start[i] + idx / s_rate[i]
            lb = labels[pos]
            f = i * nf + idx
            if lb == LAB_O:
                o_seen[g] += 1
            if kframes and drop_mask[s_level[i], pos]:
                if lb == LAB_O:
                    o_rejected[g] += 1
                fate[f] = POLICY
                fate_time[f] = r
                stats[ST_PLANNED] += 1
                continue
            fate[f] = QUEUED
            gid[q] = f
            srv[q] = s_server[i]
            rel[q] = r
            dl[q] = r + slack_mult / s_rate[i]
            lab[q] = lb
            gkey[q] = g
            sess[q] = i
            s_kept[i] += 1
            q += 1
        s_next[i] = hi[x]
        run_e[nr] = q
        if q > run_s[nr]:
            nr += 1
    n = q

    # order: server, then deadline (EDF) or release (FIFO), then frame id
    key = dl[:n] if kframes else rel[:n]
    order = merge_runs(key, gid[:n], run_s[:nr], run_e[:nr], run_srv[:nr], len(srv_rate))
    gid = gid[order]
    srv = srv[order]
    rel = rel[order]
    dl = dl[order]
    lab = lab[order]
    gkey = gkey[order]
    sess = sess[order]

    status = np.zeros(n, dtype=np.int8)
    done = np.zeros(n)
    serve_queue(srv, rel, dl, lab, gkey, srv_rate, srv_free, t0, t1, feedback, kframes,
                o_seen, o_rejected, status, done)

    keep = 0
    n_sent = 0
    for j in range(n):
        if status[j] == REJECTED:
            fate[gid[j]] = POLICY
            fate_time[gid[j]] = min(max(dl[j], t0), t1)
            stats[ST_POLICY] += 1
            if lab[j] == LAB_M:
                stats[ST_I_POLICY] += 1
        elif status[j] == SERVED:
            served[gid[j]] = True
            n_sent += 1
        else:
            waited[gid[j]] = True
            keep += 1
    r_idx = np.empty(keep, dtype=np.int64)
    s_idx = np.empty(n_sent, dtype=np.int64)
    a = 0
    b = 0
    for j in range(n):
        if status[j] == 0:
            r_idx[a] = j
            a += 1
        elif status[j] == SERVED:
            s_idx[b] = j
            b += 1
    s_idx = s_idx[np.argsort(done[s_idx], kind="mergesort")]
    return (gid[r_idx], srv[r_idx], rel[r_idx], dl[r_idx], lab[r_idx], gkey[r_idx], sess[r_idx],
            gid[s_idx], done[s_idx], dl[s_idx], lab[s_idx], sess[s_idx])


@njit(cache=True)
def _fifo_count(arr, skip, rate, free, t1):
    """Frames (not skipped) that leave a FIFO link by ``t1``."""
    gap = 1.0 / rate
    t = free
    count = 0
    for j in range(len(arr)):
        if skip[j]:
            continue
        dep = max(t, arr[j]) + gap
        if dep > t1 + EPS:
            break
        t = dep
        count += 1
    return count


@njit(cache=True)
def link_tick(t1, l_gid, l_arr, l_dl, l_lab, l_sess, rate, free, buffer_frames, baseline,
              p_loss, uniforms, latency, fate, fate_time, s_got, stats):
    """Compiled twin of ``sim_engine.network_step`` that also records fates.

    ``free`` is a one-element array updated in place; ``uniforms`` holds
    ``2 * len(l_gid)`` draws. Returns the indices of the frames still buffered.
    """
    n = len(l_gid)
    drop = np.zeros(n, dtype=np.bool_)
    excess = (n - _fifo_count(l_arr, drop, rate, free[0], t1)) - buffer_frames
    if excess > 0:
        if baseline:
            victims = np.argsort(uniforms[:n], kind="mergesort")[:excess]
            for v in victims:
                drop[v] = True
        else:
            left = excess
            for lb in (LAB_O, LAB_H, LAB_M):
                x = n - 1
                while x >= 0 and left > 0:
                    if l_lab[x] == lb:
                        drop[x] = True
                        left -= 1
                    x -= 1
        i_over = 0
        optional_left = False
        for x in range(n):
            if drop[x]:
                fate[l_gid[x]] = NET_DROP
                fate_time[l_gid[x]] = t1
                if l_lab[x] == LAB_M:
                    i_over += 1
            elif l_lab[x] != LAB_M:
                optional_left = True
        stats[ST_I_OVER] += i_over
        if optional_left and not baseline:
            stats[ST_I_OVER_OPT] += i_over
    gap = 1.0 / rate
    t = free[0]
    held = 0
    out = np.empty(n, dtype=np.int64)
    leaving = True
    for j in range(n):
        if drop[j]:
            continue
        if leaving:
            dep = max(t, l_arr[j]) + gap
            if dep > t1 + EPS:
                leaving = False
        if not leaving:
            out[held] = j
            held += 1
            continue
        t = dep
        f = l_gid[j]
        if p_loss > 0 and uniforms[n + j] < p_loss:
            fate[f] = RANDOM_LOSS
            fate_time[f] = dep
        elif dep <= l_dl[j] + EPS:
            fate[f] = RECEIVED
            fate_time[f] = dep + latency
            s_got[l_sess[j]] += 1
        else:
            fate[f] = LATE
            fate_time[f] = dep + latency
    if t > free[0]:
        free[0] = t
    return out[:held]


@njit(cache=True)
def bucket_counts(s_start, s_rate, s_next, nf, gop_len, is_ref, fate, fate_time, served, waited,
                  t_sim, width, nb):
    """Per-bucket counters over released frames, by release-time cohort.

    Rows: sent, received, useful, policy, network, random, late, waiting, served.
    """
    out = np.zeros((9, nb), dtype=np.int64)
    for i in range(len(s_next)):
        ok = True
        for idx in range(s_next[i]):
            pos = idx % gop_len
            if pos == 0:
                ok = True
            r = s_start[i] + idx / s_rate[i]
            f = i * nf + idx
            rec = fate[f] == RECEIVED and fate_time[f] <= t_sim + EPS
            if r < t_sim:
                b = min(int(r / width + EPS), nb - 1)
                out[0, b] += 1
                if rec:
                    out[1, b] += 1
                    if ok:
                        out[2, b] += 1
                elif fate_time[f] <= t_sim + EPS:
                    if fate[f] == POLICY:
                        out[3, b] += 1
                    elif fate[f] == NET_DROP:
                        out[4, b] += 1
                    elif fate[f] == RANDOM_LOSS:
                        out[5, b] += 1
                    elif fate[f] == LATE:
                        out[6, b] += 1
                if waited[f]:
                    out[7, b] += 1
                if served[f]:
                    out[8, b] += 1
            if is_ref[pos] and not rec:
                ok = False
    return out
