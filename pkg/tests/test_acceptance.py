"""Acceptance suite: one test per shipped guarantee.

Each test prints a single verdict line (run ``pytest tests/test_acceptance.py
-v -s`` to see them as they pass). The two scaled-down trend studies take
hours and are marked ``slow``; they are deselected by default and opt in via
``pytest -m slow``.
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

import eclab.diffengine as de
from eclab.diffengine import Tape, Tensor, backward, grad_check, kink_margin, tensor
from eclab.game import (
    GameConfig,
    BaselineState,
    RewoState,
    build_agents,
    joint_parameters,
    load_parameters,
    play_batch,
    rewo_update,
    run_filter,
)
from eclab.meanings import count_dyck, enumerate_attr_val, enumerate_dyck, split
from eclab.neural_stack import (
    StackDirectives,
    StackState,
    stack_pop,
    stack_push,
    stack_read,
    stack_step,
    total_strength,
)
from eclab.runner import resolve_preset, run, stream_generator, stream_seed


def _report(num, name, ok, detail=""):
    line = f"[criterion {num:2d}] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


def f64(a):
    return tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


# ---------------------------------------------------------------------------
# 1. discrete-limit stack oracle


def test_01_stack_matches_discrete_stack_in_unit_limit():
    rng = np.random.default_rng(11)
    n, width, t_max = 1000, 4, 20
    lengths = rng.integers(1, t_max + 1, size=n)
    us = rng.integers(0, 2, size=(t_max, n)).astype(np.float64)
    ds = rng.integers(0, 2, size=(t_max, n)).astype(np.float64)
    vals = rng.normal(size=(t_max, n, width))
    ones = np.ones(n)

    started = time.monotonic()
    state = StackState.empty(width, batch=n, dtype=np.float64)
    piles = [[] for _ in range(n)]
    worst = 0.0
    for t in range(t_max):
        state, read = stack_step(
            state,
            StackDirectives(v=f64(vals[t]), u=f64(us[t]), d=f64(ds[t]), r=f64(ones)),
        )
        for i in range(n):
            if t >= lengths[i]:
                continue
            if us[t, i] and piles[i]:
                piles[i].pop()
            if ds[t, i]:
                piles[i].append(vals[t, i])
            want = piles[i][-1] if piles[i] else np.zeros(width)
            err = float(np.max(np.abs(read.data[i] - want)))
            if err > worst:
                worst = err
    elapsed = time.monotonic() - started
    _report(
        1,
        "stack matches a discrete stack in the 0/1 limit",
        worst <= 1e-6 and elapsed < 10.0,
        f"1000 sequences, max deviation {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. strength conservation and read-mass laws


def test_02_strength_conservation_and_read_mass():
    rng = np.random.default_rng(23)
    n, width, depth = 1000, 3, 6
    ones_col = np.ones((n, width))
    state = StackState.empty(width, batch=n, dtype=np.float64)
    for _ in range(depth):
        state = stack_push(state, f64(ones_col), f64(rng.uniform(0, 2, size=n)))
    u = f64(rng.uniform(0, 2, size=n))
    d = f64(rng.uniform(0, 2, size=n))
    r = f64(rng.uniform(0, 2, size=n))

    before = total_strength(state).data
    popped = stack_pop(state, u)
    after_pop = total_strength(popped).data
    err_pop = np.max(np.abs(after_pop - (before - np.minimum(u.data, before))))

    pushed = stack_push(popped, f64(ones_col), d)
    after_push = total_strength(pushed).data
    err_push = np.max(np.abs(after_push - (after_pop + d.data)))

    # every value vector is all-ones, so each read component equals the mass
    mass = stack_read(pushed, r).data[:, 0]
    err_read = np.max(np.abs(mass - np.minimum(r.data, after_push)))

    worst = float(max(err_pop, err_push, err_read))
    _report(
        2,
        "strength conservation and read-mass laws",
        worst <= 1e-9,
        f"1000 fractional steps, max abs error {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# 3. gradient checks: primitives, stack transitions, end-to-end loss


def _primitive_cases(rng):
    cases = []
    x34 = rng.normal(size=(3, 4))
    c34 = f64(rng.normal(size=(3, 4)))
    w34 = f64(rng.normal(size=(3, 4)))
    w35 = f64(rng.normal(size=(3, 5)))
    w33 = f64(rng.normal(size=(3, 3)))
    w3 = f64(rng.normal(size=3))
    w4 = f64(rng.normal(size=4))
    w5 = f64(rng.normal(size=5))

    def weighted(op):
        return lambda x: de.reduce_sum(de.mul(op(x), w34))

    cases.append(("add", weighted(lambda x: de.add(x, c34)), x34))
    cases.append(("add scalar", weighted(lambda x: de.add(x, 1.5)), x34))
    cases.append(("sub", weighted(lambda x: de.sub(x, c34)), x34))
    cases.append(("mul", lambda x: de.reduce_sum(de.mul(x, c34)), x34))
    # keep a fixed distance from the max/min switching surface
    off = (rng.integers(0, 2, size=(3, 4)) * 2 - 1) * (0.25 + rng.uniform(0, 1, (3, 4)))
    other = f64(x34 + off)
    cases.append(("maximum", weighted(lambda x: de.maximum(x, other)), x34))
    cases.append(("minimum", weighted(lambda x: de.minimum(x, other)), x34))
    cases.append(("sigmoid", weighted(de.sigmoid), x34))
    cases.append(("tanh", weighted(de.tanh), x34))
    cases.append(("exp", weighted(de.exp), x34))
    cases.append(("log", weighted(de.log), 0.5 + rng.uniform(0, 2, (3, 4))))
    m45 = f64(rng.normal(size=(4, 5)))
    v4 = f64(rng.normal(size=4))
    cases.append(
        ("matmul 2d@2d", lambda x: de.reduce_sum(de.mul(de.matmul(x, m45), w35)), x34)
    )
    cases.append(
        ("matmul 1d@2d", lambda x: de.reduce_sum(de.mul(de.matmul(x, m45), w5)), rng.normal(size=4))
    )
    cases.append(
        ("matmul 2d@1d", lambda x: de.reduce_sum(de.mul(de.matmul(x, v4), w3)), x34)
    )
    cases.append(("add_bias matrix", weighted(lambda x: de.add_bias(x, v4)), x34))
    cases.append(
        ("add_bias vector", lambda x: de.reduce_sum(de.mul(de.add_bias(c34, x), w34)), rng.normal(size=4))
    )
    s3 = f64(rng.uniform(0.5, 1.5, size=3))
    cases.append(("scale_rows matrix", weighted(lambda x: de.scale_rows(x, s3)), x34))
    cases.append(
        ("scale_rows scales", lambda x: de.reduce_sum(de.mul(de.scale_rows(c34, x), w34)), rng.normal(size=3))
    )
    idx_rows = np.array([0, 2, 2, 4])
    w43 = f64(rng.normal(size=(4, 3)))
    cases.append(
        ("take_rows", lambda x: de.reduce_sum(de.mul(de.take_rows(x, idx_rows), w43)), rng.normal(size=(5, 3)))
    )
    idx_last = np.array([1, 0, 3])
    cases.append(
        ("take_last", lambda x: de.reduce_sum(de.mul(de.take_last(x, idx_last), w3)), x34)
    )
    c33 = f64(rng.normal(size=(3, 3)))
    w37 = f64(rng.normal(size=(3, 7)))
    cases.append(
        ("concat", lambda x: de.reduce_sum(de.mul(de.concat([x, c33]), w37)), x34)
    )
    cases.append(
        ("slice_last", lambda x: de.reduce_sum(de.mul(de.slice_last(x, 1, 4), w33)), rng.normal(size=(3, 5)))
    )
    cases.append(("reduce_sum", de.reduce_sum, x34))
    cases.append(("reduce_mean", de.reduce_mean, x34))
    cases.append(
        ("sum_last", lambda x: de.reduce_sum(de.mul(de.sum_last(x), w3)), x34)
    )
    cases.append(("softmax", weighted(de.softmax), x34))
    cases.append(("log_softmax", weighted(de.log_softmax), x34))
    return cases


def _stack_program(width, c1, c2):
    def f(x):
        state = StackState.empty(width, dtype=np.float64)
        v1 = de.slice_last(x, 0, width)
        v2 = de.slice_last(x, width, 2 * width)
        u1, u2, d1, d2, r1, r2 = (de.take_last(x, 2 * width + j) for j in range(6))
        state, read1 = stack_step(state, StackDirectives(v=v1, u=u1, d=d1, r=r1))
        state, read2 = stack_step(state, StackDirectives(v=v2, u=u2, d=d2, r=r2))
        part = de.add(de.reduce_sum(de.mul(read1, c1)), de.reduce_sum(de.mul(read2, c2)))
        return de.add(part, de.reduce_sum(total_strength(state)))

    return f


def _end_to_end_loss(sender, receiver, base, name, meanings, msgs, adv, beta):
    def f(x):
        load_parameters(sender, receiver, {**base, name: x})
        state = sender.encode(meanings)
        log_s = sender.score(state, msgs)
        enc = receiver.encode(msgs, "learned")
        log_r = receiver.reconstruct_logprob(enc, meanings)
        log_p = receiver.message_log_prior(msgs, enc.reads)
        obj = de.add(de.add(log_r, de.mul(log_s, adv)), de.mul(log_p, beta))
        return de.mul(de.reduce_mean(obj), -1.0)

    return f


def test_03_gradients_match_finite_differences():
    started = time.monotonic()
    worst, worst_at = 0.0, ""

    # (a) every primitive op
    for case_name, builder, x0 in _primitive_cases(np.random.default_rng(31)):
        rel = grad_check(builder, f64(x0))
        if rel > worst:
            worst, worst_at = rel, case_name
        assert rel <= 1e-4, f"{case_name}: rel err {rel:.3g}"

    # (b) a two-step stack program through pop/push/read
    width = 3
    rng = np.random.default_rng(37)
    c1, c2 = f64(rng.normal(size=width)), f64(rng.normal(size=width))
    program = _stack_program(width, c1, c2)
    point = None
    for _ in range(50):
        x0 = np.concatenate(
            [rng.normal(size=2 * width), rng.uniform(0.3, 1.7, size=6)]
        )
        if kink_margin(program, f64(x0)) >= 1e-3:
            point = f64(x0)
            break
    assert point is not None, "no kink-free stack program point found"
    rel = grad_check(program, point)
    if rel > worst:
        worst, worst_at = rel, "stack program"
    assert rel <= 1e-4, f"stack program: rel err {rel:.3g}"

    # (c) the full loss: sender unroll -> receiver stack -> reconstruction and
    # message prior (the entropy bonus shares every parameter path with the
    # message score, so scored log-probabilities stand in for it here)
    space = enumerate_attr_val(2, 3)
    config = GameConfig(hidden=8, embedding=6, vocab=4, max_len=3, beta_mode="rewo")
    setup = None
    for seed in range(40, 60):
        sender, receiver = build_agents(
            space, config, np.random.default_rng(seed), dtype=np.float64
        )
        # push parameter scale up so pop/push head subgradients are live
        spread = {
            n: Tensor._wrap(t.data * 4.0)
            for n, t in joint_parameters(sender, receiver).items()
        }
        load_parameters(sender, receiver, spread)
        base = joint_parameters(sender, receiver)
        meanings = [space.meanings[i] for i in (0, 3, 5, 7)]
        emitted = sender.emit(
            sender.encode(meanings), mode="sample", rng=np.random.default_rng(seed + 1)
        )
        msgs = [m.symbols for m in emitted.messages]
        if max(len(m) for m in msgs) < 2:
            continue
        adv = Tensor._wrap(np.random.default_rng(seed + 2).normal(size=len(msgs)))
        probe = _end_to_end_loss(sender, receiver, base, "sender.out.W", meanings, msgs, adv, 0.5)
        if kink_margin(probe, base["sender.out.W"]) >= 1e-3:
            setup = (sender, receiver, base, meanings, msgs, adv)
            break
    assert setup is not None, "no kink-free end-to-end point found"
    sender, receiver, base, meanings, msgs, adv = setup
    for name in (
        "sender.out.W",
        "sender.encoder.lin.W",
        "sender.cell.W",
        "receiver.cell.W",
        "receiver.emb.table",
        "receiver.to_value.W",
        "receiver.to_u.w",
        "receiver.to_d.w",
        "receiver.to_r.w",
        "receiver.heads.0.W",
        "receiver.prior_out.W",
    ):
        loss = _end_to_end_loss(sender, receiver, base, name, meanings, msgs, adv, 0.5)
        rel = grad_check(loss, base[name])
        if rel > worst:
            worst, worst_at = rel, name
        assert rel <= 1e-4, f"{name}: rel err {rel:.3g}"

    elapsed = time.monotonic() - started
    _report(
        3,
        "gradients match central finite differences",
        worst <= 1e-4 and elapsed < 60.0,
        f"worst rel err {worst:.2e} at {worst_at}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 4. left-branching collapse


def test_04_left_branching_reads_echo_push_values():
    rng = np.random.default_rng(41)
    space = enumerate_attr_val(2, 3)
    config = GameConfig(hidden=16, embedding=8, vocab=4, max_len=8)
    _, receiver = build_agents(space, config, rng, dtype=np.float64)

    msgs = []
    for _ in range(100):
        length = int(rng.integers(1, 9))
        if length < 8:
            body = tuple(int(s) for s in rng.integers(1, 4, size=length - 1)) + (0,)
        else:
            tail = (0,) if rng.integers(0, 2) else (int(rng.integers(1, 4)),)
            body = tuple(int(s) for s in rng.integers(1, 4, size=7)) + tail
        msgs.append(body)

    enc = receiver.encode(msgs, "left", want_trace=True)
    lengths = np.array([len(m) for m in msgs])
    worst = 0.0
    for t, tr in enumerate(enc.trace):
        alive = t < lengths
        err = float(np.max(np.abs(tr.read.data[alive] - tr.push_value.data[alive])))
        worst = max(worst, err)
    _report(
        4,
        "left-branching reads collapse to the pushed value",
        worst <= 1e-6,
        f"100 messages, max |r_t - v_t| = {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# 5. meaning-space enumeration counts


def _closed_form_count(k, l_max):
    return sum(
        math.comb(2 * n, n) // (n + 1) * k**n for n in range(l_max // 2 + 1)
    )


def _expansion_count(k, l_max):
    """Count words by depth-first expansion with feasibility pruning."""
    total = 0

    def go(rem, depth, weight):
        nonlocal total
        if depth == 0:
            total += weight
        if rem == 0:
            return
        if rem >= depth + 2:
            go(rem - 1, depth + 1, weight * k)
        if depth:
            go(rem - 1, depth - 1, weight)

    go(l_max, 0, 1)
    return total


def test_05_enumeration_counts():
    started = time.monotonic()
    pinned = {(1, 18): 6918, (4, 8): 3941, (9, 6): 3817}
    details = []
    ok = True
    for (k, l_max), expect in pinned.items():
        got = (
            len(enumerate_dyck(k, l_max)),
            count_dyck(k, l_max),
            _closed_form_count(k, l_max),
            _expansion_count(k, l_max),
        )
        ok = ok and all(g == expect for g in got)
        details.append(f"({k},{l_max})->{got[0]}")
    for n_att, n_val in ((2, 64), (3, 16), (4, 8), (6, 4)):
        size = len(enumerate_attr_val(n_att, n_val))
        ok = ok and size == 4096
        details.append(f"{n_att}x{n_val}->{size}")
    elapsed = time.monotonic() - started
    _report(
        5,
        "meaning-space enumeration counts",
        ok and elapsed < 10.0,
        ", ".join(details) + f", {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 6. score-function estimator is unbiased


def test_06_reinforce_estimator_is_unbiased():
    space = enumerate_attr_val(2, 2)
    config = GameConfig(hidden=8, embedding=6, vocab=3, max_len=2, beta_mode="rewo")
    sender, receiver = build_agents(
        space, config, np.random.default_rng(61), dtype=np.float64
    )
    params = joint_parameters(sender, receiver)
    meaning = space.meanings[1]
    msgs = [(0,), (1, 0), (2, 0), (1, 1), (1, 2), (2, 1), (2, 2)]
    n = len(msgs)
    beta, baseline = 0.7, 0.3

    # exact gradient of J = sum_m S(m) * (log R + beta * (log P - log S))
    with Tape() as tape:
        state = sender.encode([meaning] * n)
        log_s = sender.score(state, msgs)
        enc = receiver.encode(msgs, "learned")
        log_r = receiver.reconstruct_logprob(enc, [meaning] * n)
        log_p = receiver.message_log_prior(msgs, enc.reads)
        inner = de.add(log_r, de.mul(de.sub(log_p, log_s), beta))
        j = de.reduce_sum(de.mul(de.exp(log_s), inner))
        exact = backward(tape, j)
    exact_by_name = {name: exact[t] for name, t in params.items()}
    probs = np.exp(log_s.data)
    assert abs(probs.sum() - 1.0) < 1e-12  # the policy covers exactly these messages

    # expectation of the sampled surrogate gradient, message by message
    expected = {name: np.zeros_like(g) for name, g in exact_by_name.items()}
    for i, msg in enumerate(msgs):
        with Tape() as tape:
            state1 = sender.encode([meaning])
            ls = sender.score(state1, [msg])
            enc1 = receiver.encode([msg], "learned")
            lr = receiver.reconstruct_logprob(enc1, [meaning])
            lp = receiver.message_log_prior([msg], enc1.reads)
            reward = float(lr.data[0] - beta * (ls.data[0] - lp.data[0]))
            surrogate = de.reduce_sum(
                de.add(de.add(lr, de.mul(ls, reward - baseline)), de.mul(lp, beta))
            )
            grads = backward(tape, surrogate)
        for name, t in params.items():
            expected[name] += probs[i] * grads[t]

    worst = max(
        float(np.max(np.abs(expected[name] - exact_by_name[name])))
        for name in expected
    )
    _report(
        6,
        "score-function gradient estimator is unbiased",
        worst <= 1e-6,
        f"{n} messages enumerated, max abs gradient gap {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# 7. smoke learning run


def test_07_smoke_preset_learns_the_channel(tmp_path):
    wins = 0
    details = []
    for seed in range(5):
        config = resolve_preset("smoke-attrval", seed=seed, stop_comacc_train=0.95)
        started = time.monotonic()
        result = run(config, out_dir=tmp_path / f"smoke-s{seed}")
        elapsed = time.monotonic() - started
        best = max(r.comacc_train for r in result.records)
        ok = best >= 0.95 and elapsed <= 600.0
        wins += ok
        details.append(
            f"seed {seed}: {best:.2f}@{result.records[-1].iteration}it/{elapsed:.0f}s"
        )
    _report(7, "smoke preset learns the channel", wins >= 4, "; ".join(details))


# ---------------------------------------------------------------------------
# 8. KL-weight controller trajectory and run filter


def test_08_beta_trajectory_and_run_filter():
    filter_ok = (
        run_filter(0.80) is False and run_filter(0.95) is True and run_filter(0.96) is True
    )

    config = resolve_preset("smoke-attrval", seed=0, beta_mode="rewo", iterations=1200)
    space = enumerate_attr_val(config.n_att, config.n_val)
    train_idx, _ = split(space, seed=stream_seed(config.seed, "split"))
    train = [space.meanings[i] for i in train_idx]
    batch_rng = stream_generator(config.seed, "batch")
    sender_rng = stream_generator(config.seed, "sender")
    sender, receiver = build_agents(
        space, config, stream_generator(config.seed, "init")
    )
    from eclab.diffengine import AdamState, adam_step

    params = joint_parameters(sender, receiver)
    opt = AdamState(lr=config.lr, l2=config.l2)
    base = BaselineState(decay=config.baseline_decay)
    rewo = RewoState.from_config(config)

    first_beta = None
    floor_ok = True
    monotone = True
    low_ema_steps = 0
    for _ in range(config.iterations):
        picks = batch_rng.integers(0, len(train), size=config.batch_size)
        stats, grads, base = play_batch(
            sender,
            receiver,
            [train[i] for i in picks],
            config,
            rng=sender_rng,
            baseline=base,
            beta=rewo.beta,
        )
        params = adam_step(opt, params, grads)
        load_parameters(sender, receiver, params)
        if first_beta is None:
            first_beta = stats.beta
        prev = rewo.beta
        rewo = rewo_update(rewo, stats.recon_loss)
        floor_ok = floor_ok and rewo.beta >= config.beta0 - 1e-15
        if rewo.loss_ema < config.kappa:
            low_ema_steps += 1
            monotone = monotone and rewo.beta >= prev - 1e-15

    ok = (
        filter_ok
        and first_beta == config.beta0 == 1e-3
        and floor_ok
        and monotone
        and low_ema_steps >= 50
    )
    _report(
        8,
        "KL-weight controller trajectory and run filter",
        ok,
        f"start {first_beta}, {low_ema_steps} low-EMA steps all nondecreasing, "
        f"final beta {rewo.beta:.4g}, filter pins ok={filter_ok}",
    )


# ---------------------------------------------------------------------------
# 9-10. scaled-down trend studies (hours; opt in with -m slow)


@pytest.mark.slow
def test_09_random_branching_deficit_grows_with_bracket_count(tmp_path):
    """~5 h: 20 runs of the dyck smoke preset at two bracket counts."""
    gaps = {}
    for k in (1, 4):
        means = {}
        for strategy in ("learned", "random"):
            finals = []
            for seed in range(5):
                config = resolve_preset("smoke-dyck", k=k, strategy=strategy, seed=seed)
                result = run(config, out_dir=tmp_path / f"dyck{k}-{strategy}-s{seed}")
                finals.append(result.records[-1].comacc_test)
            means[strategy] = float(np.mean(finals))
        gaps[k] = means["learned"] - means["random"]
    _report(
        9,
        "random-branching deficit grows with bracket count",
        gaps[4] > gaps[1],
        f"test-ComAcc gap: k=1 {gaps[1]:+.3f}, k=4 {gaps[4]:+.3f}",
    )


def _thirds(values):
    """Smooth a noisy eval series and average its middle and final thirds."""
    smooth = np.convolve(values, np.ones(3) / 3.0, mode="valid")
    cut = len(smooth) // 3
    return float(np.mean(smooth[cut : 2 * cut])), float(np.mean(smooth[2 * cut :]))


@pytest.mark.slow
def test_10_random_branching_overfits_message_prior(tmp_path):
    """~3 h: 15 runs, annealed far enough that the KL weight saturates.

    The preset's 2,000-iteration budget keeps the KL weight at its 1e-3
    floor (it needs ~7k iterations to ramp), so the runs here are extended
    until annealing pressure is actually on, and trends are read from
    smoothed window means rather than endpoints.
    """
    hits = {}
    for strategy in ("learned", "left", "random"):
        hits[strategy] = 0
        for seed in range(5):
            config = resolve_preset(
                "smoke-attrval", beta_mode="rewo", strategy=strategy, seed=seed,
                iterations=12000, eval_every=200, eval_draws=5,
            )
            result = run(config, out_dir=tmp_path / f"prior-{strategy}-s{seed}")
            settled = [r for r in result.records if r.iteration >= 2000]
            tr_mid, tr_late = _thirds([r.mean_log_prior_train for r in settled])
            te_mid, te_late = _thirds([r.mean_log_prior_test for r in settled])
            if strategy == "random":
                hits[strategy] += tr_late > tr_mid and te_late < te_mid
            else:
                hits[strategy] += tr_late > tr_mid and te_late > te_mid
    ok = all(count >= 3 for count in hits.values())
    _report(
        10,
        "random branching overfits the message prior",
        ok,
        "; ".join(f"{s}: {c}/5" for s, c in hits.items()),
    )


# ---------------------------------------------------------------------------
# 11. deterministic mode reruns byte-identical


def test_11_deterministic_reruns_are_byte_identical(tmp_path):
    args = [
        sys.executable, "-m", "eclab", "run",
        "--preset", "smoke-attrval", "--seed", "4",
        "--set", "iterations=60", "--set", "eval_every=20",
        "--set", "hidden=16", "--set", "embedding=8", "--set", "batch_size=32",
    ]
    env = {"ECLAB_DETERMINISTIC": "1", "PATH": os.environ.get("PATH", "/usr/bin:/bin")}
    first = subprocess.run(
        args + ["--out", str(tmp_path / "a")], env=env, capture_output=True, text=True
    )
    second = subprocess.run(
        args + ["--out", str(tmp_path / "b")], env=env, capture_output=True, text=True
    )
    assert first.returncode == 0, first.stderr
    assert second.returncode == 0, second.stderr
    bytes_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    _report(
        11,
        "deterministic mode reruns byte-identical",
        bytes_a == bytes_b and b"wall_seconds" in bytes_a,
        f"{len(bytes_a)} bytes each",
    )
