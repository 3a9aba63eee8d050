"""Finite-difference gradient checking with kink-aware resampling.

A check case bundles leaf arrays with a forward closure mapping fresh
Params to a scalar loss. The checker compares tape gradients against
central differences ((f(x+h) - f(x-h)) / 2h) coordinate by coordinate.

Piecewise ops (ReLU, top-k) report their sign/selection pattern to a
KinkMonitor during every evaluation. If the pattern differs between the
two points of a central difference, that coordinate straddles a kink and
its difference quotient is meaningless, so the coordinate is skipped.
A case where more than half the probed coordinates straddle kinks is
resampled with fresh random draws; after max_attempts such resamples the
case is reported as inconclusive rather than passed.

Relative error uses |fd - g| / max(|fd|, |g|, denom_floor). The floor
keeps roundoff noise in near-zero gradients from registering as error
while still flagging any O(1) relative defect in small gradients. The
default floor is 1e-2 in f64. In f32 the difference quotient itself
carries ~1e-2 relative rounding noise on O(1) gradients, so f32 checks
default to floor 1.0: they validate plumbing (dtype propagation, branch
wiring) on an absolute scale, while f64 is the correctness layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tape import KinkMonitor, Param, Tape, Tensor


@dataclass
class GradCase:
    """Leaves are live Param objects; the checker perturbs their .data in
    place, so forward() must read them fresh on every call and must not
    keep state across calls (batch-norm running buffers are fine: they
    never feed a training-mode output)."""
    name: str
    params: dict
    forward: Callable


@dataclass
class TensorReport:
    checked: int = 0
    skipped: int = 0
    max_rel_err: float = 0.0


@dataclass
class CaseResult:
    name: str
    seed: int
    status: str  # "pass" | "fail" | "inconclusive"
    attempts: int
    max_rel_err: float
    tensors: dict = field(default_factory=dict)


@dataclass
class GradCheckReport:
    name: str
    tol: float
    h: float
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.status == "pass" for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    def counts(self) -> dict:
        out = {"pass": 0, "fail": 0, "inconclusive": 0}
        for r in self.results:
            out[r.status] += 1
        return out

    def summary(self) -> str:
        c = self.counts()
        tag = "pass" if self.passed else ("FAIL" if c["fail"] else "INCONCLUSIVE")
        return (f"{self.name:<28s} seeds {c['pass']:>2d}/{len(self.results):<2d} {tag:<12s} "
                f"max_rel {self.max_rel_err:.3e}")


def _eval(case: GradCase) -> tuple:
    """One tape-free forward pass; returns (loss value, kink monitor)."""
    with KinkMonitor() as mon:
        loss = case.forward()
    return float(loss.data), mon


def _tape_grads(case: GradCase) -> Optional[dict]:
    for p in case.params.values():
        p.zero_grad()
    with Tape() as tape, KinkMonitor():
        loss = case.forward()
        if not np.isfinite(loss.data).all():
            return None
        tape.backward(loss)
    return {k: p.grad.copy() for k, p in case.params.items()}


def _pick_coords(case: GradCase, rng, per_tensor_cap: int, total_cap: int) -> list:
    """Round-robin coordinate selection across tensors up to the caps."""
    pools = []
    for name, p in case.params.items():
        n = p.data.size
        take = min(n, per_tensor_cap)
        idx = np.arange(n) if n <= take else rng.choice(n, size=take, replace=False)
        pools.append([(name, int(i)) for i in idx])
    coords = []
    rank = 0
    while len(coords) < total_cap:
        advanced = False
        for pool in pools:
            if rank < len(pool):
                coords.append(pool[rank])
                advanced = True
                if len(coords) >= total_cap:
                    break
        if not advanced:
            break
        rank += 1
    return coords


def _check_once(case: GradCase, rng, tol: float, h: float,
                per_tensor_cap: int, total_cap: int, denom_floor: float) -> Optional[CaseResult]:
    """None means too many kink hits: caller should resample the case."""
    grads = _tape_grads(case)
    if grads is None:
        return CaseResult(case.name, -1, "fail", 0, float("inf"))
    coords = _pick_coords(case, rng, per_tensor_cap, total_cap)
    reports = {k: TensorReport() for k in case.params}
    skipped = 0
    max_rel = 0.0
    for name, flat_i in coords:
        a = case.params[name].data.reshape(-1)
        orig = a[flat_i]
        a[flat_i] = orig + h
        fp, mon_p = _eval(case)
        a[flat_i] = orig - h
        fm, mon_m = _eval(case)
        a[flat_i] = orig
        if not mon_p.matches(mon_m):
            skipped += 1
            reports[name].skipped += 1
            continue
        fd = (fp - fm) / (2.0 * float(h))
        g = float(grads[name].reshape(-1)[flat_i])
        rel = abs(fd - g) / max(abs(fd), abs(g), denom_floor)
        reports[name].checked += 1
        reports[name].max_rel_err = max(reports[name].max_rel_err, rel)
        max_rel = max(max_rel, rel)
    if coords and skipped > len(coords) // 2:
        return None
    status = "pass" if max_rel <= tol else "fail"
    return CaseResult(case.name, -1, status, 0, max_rel, reports)


def grad_check(builder: Callable, *, seeds: int = 20, tol: float = 1e-5,
               h: float = 1e-5, dtype=np.float64, per_tensor_cap: int = 8,
               total_cap: int = 64, max_attempts: int = 8,
               denom_floor: Optional[float] = None, base_entropy: int = 0) -> GradCheckReport:
    """Check one case builder across several random seeds.

    builder(rng, dtype) -> GradCase. Each seed gets its own random case;
    kink-straddling cases are redrawn up to max_attempts times before the
    seed is declared inconclusive.
    """
    if denom_floor is None:
        denom_floor = 1.0 if np.dtype(dtype) == np.float32 else 1e-2
    probe = builder(np.random.default_rng(0), dtype)
    report = GradCheckReport(probe.name, tol, float(h))
    for seed in range(seeds):
        result = None
        attempt = 0
        for attempt in range(max_attempts):
            rng = np.random.default_rng(np.random.SeedSequence((base_entropy, seed, attempt)))
            case = builder(rng, dtype)
            result = _check_once(case, rng, tol, h,
                                 per_tensor_cap, total_cap, denom_floor)
            if result is not None:
                break
        if result is None:
            result = CaseResult(probe.name, seed, "inconclusive", max_attempts, float("nan"))
        else:
            result.seed = seed
            result.attempts = attempt + 1
        report.results.append(result)
    return report


# ---------------------------------------------------------------------------
# op-level case builders

def _probe_loss(out: Tensor, rng) -> Tensor:
    """Random linear functional of an op output, as the check loss."""
    from . import ops
    r = rng.normal(size=out.data.shape).astype(out.data.dtype)
    return ops.reduce_sum(ops.mul(out, Tensor(r)))


def op_cases() -> dict:
    """name -> builder for every differentiable op."""
    from . import ops

    def mk(name, arrays_fn, forward_fn):
        def builder(rng, dtype):
            params = {k: Param(v.astype(dtype), k) for k, v in arrays_fn(rng).items()}
            probe_seed = int(rng.integers(2 ** 32))

            def forward():
                # fresh generator per call so every evaluation sees the
                # same probe functional
                return forward_fn(params, np.random.default_rng(probe_seed))

            return GradCase(name, params, forward)
        return name, builder

    def n(rng, *shape):
        return rng.normal(size=shape)

    cases = dict([
        mk("op:add_broadcast",
           lambda rng: {"a": n(rng, 2, 3), "b": n(rng, 3)},
           lambda p, r: _probe_loss(ops.add(p["a"], p["b"]), r)),
        mk("op:sub",
           lambda rng: {"a": n(rng, 2, 3), "b": n(rng, 2, 3)},
           lambda p, r: _probe_loss(ops.sub(p["a"], p["b"]), r)),
        mk("op:mul_broadcast",
           lambda rng: {"a": n(rng, 2, 3), "b": n(rng, 2, 1)},
           lambda p, r: _probe_loss(ops.mul(p["a"], p["b"]), r)),
        mk("op:div",
           lambda rng: {"a": n(rng, 2, 3), "b": np.sign(n(rng, 2, 3)) * 1.0 + n(rng, 2, 3) * 0.2},
           lambda p, r: _probe_loss(ops.div(p["a"], p["b"]), r)),
        mk("op:relu",
           lambda rng: {"x": n(rng, 3, 4)},
           lambda p, r: _probe_loss(ops.relu(p["x"]), r)),
        mk("op:sigmoid",
           lambda rng: {"x": n(rng, 3, 4)},
           lambda p, r: _probe_loss(ops.sigmoid(p["x"]), r)),
        mk("op:softplus",
           lambda rng: {"x": n(rng, 3, 4)},
           lambda p, r: _probe_loss(ops.softplus(p["x"]), r)),
        mk("op:exp",
           lambda rng: {"x": n(rng, 3, 4) * 0.5},
           lambda p, r: _probe_loss(ops.exp(p["x"]), r)),
        mk("op:softmax",
           lambda rng: {"x": n(rng, 3, 6)},
           lambda p, r: _probe_loss(ops.softmax_lastdim(p["x"]), r)),
        mk("op:softmax_masked",
           lambda rng: {"x": n(rng, 3, 6)},
           lambda p, r: _probe_loss(ops.softmax_lastdim(
               ops.masked_fill_neg_inf(p["x"], _FIXED_KEEP)), r)),
        mk("op:log_softmax",
           lambda rng: {"x": n(rng, 3, 6)},
           lambda p, r: _probe_loss(ops.log_softmax_lastdim(p["x"]), r)),
        mk("op:reduce_sum_axes",
           lambda rng: {"x": n(rng, 2, 3, 4)},
           lambda p, r: _probe_loss(ops.reduce_sum(p["x"], axes=(1,)), r)),
        mk("op:reduce_mean_axes",
           lambda rng: {"x": n(rng, 2, 3, 4)},
           lambda p, r: _probe_loss(ops.reduce_mean(p["x"], axes=(0, 2)), r)),
        mk("op:matmul",
           lambda rng: {"a": n(rng, 2, 3, 4), "b": n(rng, 2, 4, 3)},
           lambda p, r: _probe_loss(ops.matmul(p["a"], p["b"]), r)),
        mk("op:linear",
           lambda rng: {"x": n(rng, 3, 4), "w": n(rng, 2, 4), "b": n(rng, 2)},
           lambda p, r: _probe_loss(ops.linear(p["x"], p["w"], p["b"]), r)),
        mk("op:conv1x1x1",
           lambda rng: {"x": n(rng, 2, 3, 2, 3, 2), "w": n(rng, 2, 3), "b": n(rng, 2)},
           lambda p, r: _probe_loss(ops.conv1x1x1(p["x"], p["w"], p["b"]), r)),
        mk("op:conv3x3x3",
           lambda rng: {"x": n(rng, 1, 2, 3, 2, 3), "w": n(rng, 2, 2, 3, 3, 3), "b": n(rng, 2)},
           lambda p, r: _probe_loss(ops.conv3x3x3(p["x"], p["w"], p["b"]), r)),
        mk("op:dwconv3x3x3",
           lambda rng: {"x": n(rng, 1, 2, 3, 2, 3), "w": n(rng, 2, 3, 3, 3), "b": n(rng, 2)},
           lambda p, r: _probe_loss(ops.dwconv3x3x3(p["x"], p["w"], p["b"]), r)),
        mk("op:batch_norm_train",
           lambda rng: {"x": n(rng, 2, 2, 2, 2, 2), "g": 1.0 + 0.2 * n(rng, 2), "b": n(rng, 2)},
           lambda p, r: _probe_loss(ops.batch_norm(
               p["x"], p["g"], p["b"],
               np.zeros(2, p["x"].data.dtype), np.ones(2, p["x"].data.dtype), True), r)),
        mk("op:batch_norm_eval",
           lambda rng: {"x": n(rng, 2, 2, 2, 2, 2), "g": 1.0 + 0.2 * n(rng, 2), "b": n(rng, 2)},
           lambda p, r: _probe_loss(ops.batch_norm(
               p["x"], p["g"], p["b"],
               np.full(2, 0.3, p["x"].data.dtype), np.full(2, 1.7, p["x"].data.dtype), False), r)),
        mk("op:global_avg_pool",
           lambda rng: {"x": n(rng, 2, 3, 2, 2, 2)},
           lambda p, r: _probe_loss(ops.global_avg_pool(p["x"]), r)),
        mk("op:avg_pool2",
           lambda rng: {"x": n(rng, 1, 2, 4, 2, 4)},
           lambda p, r: _probe_loss(ops.avg_pool2(p["x"]), r)),
        mk("op:upsample_nearest2",
           lambda rng: {"x": n(rng, 1, 2, 2, 3, 2)},
           lambda p, r: _probe_loss(ops.upsample_nearest2(p["x"]), r)),
        mk("op:reshape_transpose",
           lambda rng: {"x": n(rng, 2, 3, 4)},
           lambda p, r: _probe_loss(ops.transpose(ops.reshape(p["x"], (2, 12)), (1, 0)), r)),
        mk("op:concat_split",
           lambda rng: {"a": n(rng, 1, 2, 2, 2, 2), "b": n(rng, 1, 3, 2, 2, 2)},
           lambda p, r: _probe_loss(ops.split_channels(
               ops.concat_channels([p["a"], p["b"]]), [3, 2])[0], r)),
        mk("op:weighted_sum",
           lambda rng: {"a": n(rng, 2, 3), "b": n(rng, 2, 3), "c": n(rng, 2)},
           lambda p, r: _probe_loss(ops.weighted_sum([p["a"], p["b"]], p["c"]), r)),
        mk("op:select_scalar",
           lambda rng: {"x": n(rng, 3, 3)},
           lambda p, r: _probe_loss(ops.mul(ops.select_scalar(p["x"], (1, 2)),
                                            ops.select_scalar(p["x"], (0, 0))), r)),
        mk("op:masked_fill_softmax",
           lambda rng: {"x": n(rng, 3, 6)},
           lambda p, r: _probe_loss(ops.softmax_lastdim(
               ops.masked_fill_neg_inf(p["x"], _FIXED_KEEP)), r)),
    ])
    return cases


_FIXED_KEEP = np.array([[True, True, False, True, False, True],
                        [True, False, True, True, True, False],
                        [False, True, True, False, True, True]])


def _probe_sum(outs, probe_seed) -> Tensor:
    """Fixed random functional over several output tensors."""
    from . import ops
    rng = np.random.default_rng(probe_seed)
    total = None
    for out in outs:
        r = Tensor(rng.normal(size=out.data.shape).astype(out.data.dtype))
        term = ops.reduce_sum(ops.mul(out, r))
        total = term if total is None else ops.add(total, term)
    return total


def module_cases() -> dict:
    """Gradient-check builders for the fusion, attention, and compensation
    blocks, probing every parameter plus the block inputs."""
    from .mgao import MgaoBlock, MgaoBottleneck, sparse_attention
    from .mqae import MqaeScale
    from .qib import QibScale

    def with_inputs(mod, shapes, rng, dtype):
        ins = {f"x{i}": Param(rng.normal(size=s).astype(dtype), f"x{i}")
               for i, s in enumerate(shapes)}
        params = {f"p.{n}": p for n, p in mod.named_parameters()}
        params.update(ins)
        return ins, params

    def qib_builder(rng, dtype):
        mod = QibScale(4, rng, dtype)
        ins, params = with_inputs(mod, [(1, 4, 2, 2, 2)] * 4, rng, dtype)
        seed = int(rng.integers(2 ** 32))

        def forward():
            fused, w = mod([ins[f"x{i}"] for i in range(4)])
            return _probe_sum([fused, w], seed)

        return GradCase("module:qib", params, forward)

    def attn_builder(rng, dtype):
        lt = Param(0.3 * rng.normal(size=2).astype(dtype), "log_tau")
        ins = {k: Param(rng.normal(size=(1, 2, 6, 3)).astype(dtype), k) for k in ("q", "k", "v")}
        params = dict(ins)
        params["log_tau"] = lt
        seed = int(rng.integers(2 ** 32))

        def forward():
            from . import ops
            out = sparse_attention(ins["q"], ins["k"], ins["v"], 0.5, ops.exp(lt))
            return _probe_sum([out], seed)

        return GradCase("module:sparse_attention", params, forward)

    def mgao_builder(rng, dtype):
        mod = MgaoBlock(4, rng, dtype, heads=2, ratios=(0.5, 0.8))
        ins, params = with_inputs(mod, [(1, 4, 2, 2, 2)], rng, dtype)
        seed = int(rng.integers(2 ** 32))

        def forward():
            return _probe_sum([mod(ins["x0"])], seed)

        return GradCase("module:mgao_block", params, forward)

    def bottleneck_builder(rng, dtype):
        mod = MgaoBottleneck(2, rng, dtype, heads=2, ratios=(0.5,))
        ins, params = with_inputs(mod, [(1, 2, 2, 2, 1)] * 4, rng, dtype)
        seed = int(rng.integers(2 ** 32))

        def forward():
            refined, fused = mod([ins[f"x{i}"] for i in range(4)])
            return _probe_sum(refined + [fused], seed)

        return GradCase("module:mgao_bottleneck", params, forward)

    def mqae_builder(rng, dtype):
        mod = MqaeScale(3, rng, dtype)
        mod.alpha.data[:] = 0.2 * rng.normal(size=mod.alpha.data.shape)
        ins, params = with_inputs(mod, [(1, 3, 2, 2, 2)] * 4, rng, dtype)
        seed = int(rng.integers(2 ** 32))

        def forward():
            xs = [ins[f"x{i}"] for i in range(4)]
            enhanced, qs = mod(xs, [True] * 4)
            bnd, sem = mod.aux_heads(enhanced[0])
            return _probe_sum(enhanced + qs + [bnd, sem], seed)

        return GradCase("module:mqae", params, forward)

    def end2end_builder(rng, dtype):
        from .network import AmgNet, NetConfig
        cfg = NetConfig(scales=2, base_channels=2, input_size=8,
                        heads=2, ratios=(0.5,))
        net = AmgNet(cfg, seed=int(rng.integers(2 ** 32)), dtype=dtype)
        # transfer paths carry zero gradient at the alpha=0 init; perturb
        # them so the check exercises those convs
        for name, p in net.named_parameters():
            if name.endswith("alpha") and "mqae" in name:
                p.data[:] = 0.2 * rng.normal(size=p.data.shape)
        ins = {"x0": Param(rng.normal(size=(1, 4, 8, 8, 8)).astype(dtype), "x0")}
        params = {f"p.{n}": p for n, p in net.named_parameters()}
        params.update(ins)
        seed = int(rng.integers(2 ** 32))

        def forward():
            out = net(ins["x0"], [True] * 4)
            outs = list(out.scale_logits) + out.aux_logits + out.quality
            outs += out.boundary_logits + out.semantic_logits
            return _probe_sum(outs, seed)

        return GradCase("network:end2end", params, forward)

    return {
        "module:qib": qib_builder,
        "module:sparse_attention": attn_builder,
        "module:mgao_block": mgao_builder,
        "module:mgao_bottleneck": bottleneck_builder,
        "module:mqae": mqae_builder,
        "network:end2end": end2end_builder,
    }


def run_suite(builders: dict, *, seeds: int, tol: float, h: float, dtype,
              per_tensor_cap: int = 8, total_cap: int = 64) -> list:
    """Run a dict of case builders, returning one GradCheckReport each."""
    return [grad_check(b, seeds=seeds, tol=tol, h=h, dtype=dtype,
                       per_tensor_cap=per_tensor_cap, total_cap=total_cap)
            for b in builders.values()]
