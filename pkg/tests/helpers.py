"""Independent oracles shared by the test modules."""

import numpy as np

from shieldkit.engine import LayerNode, _backward_node, _forward_node

KIND_SHAPES = ("conv2d", "dense", "relu", "maxpool2x2", "globalavgpool", "flatten")


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def random_layer(kind: str, rng: np.random.Generator):
    """A random small node and a valid input batch away from non-differentiable points."""
    b = int(rng.integers(1, 4))
    if kind == "conv2d":
        cin, cout, k = (int(v) for v in rng.integers(1, 4, 3))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = (int(v) for v in rng.integers(k, k + 4, 2))
        node = LayerNode("n", kind, {"weight": rng.normal(size=(cout, cin, k, k)), "bias": rng.normal(size=cout)},
                         {"in_channels": cin, "out_channels": cout, "kernel": k, "stride": stride, "padding": pad})
        return node, rng.normal(size=(b, cin, h, w))
    if kind == "dense":
        fin, fout = (int(v) for v in rng.integers(1, 8, 2))
        node = LayerNode("n", kind, {"weight": rng.normal(size=(fout, fin)), "bias": rng.normal(size=fout)},
                         {"in_features": fin, "out_features": fout})
        return node, rng.normal(size=(b, fin))
    if kind == "relu":
        x = rng.normal(size=(b, int(rng.integers(1, 10))))
        return LayerNode("n", kind), np.where(np.abs(x) < 0.05, 0.1, x)
    if kind == "maxpool2x2":
        c, h, w = int(rng.integers(1, 3)), 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        n = b * c * h * w
        # distinct values keep every window's argmax stable under the probe step
        x = (rng.permutation(n) * 0.01 + rng.uniform(0, 1e-3, n)).reshape(b, c, h, w)
        return LayerNode("n", kind), x
    if kind == "globalavgpool":
        c, h, w = (int(v) for v in rng.integers(1, 5, 3))
        return LayerNode("n", kind), rng.normal(size=(b, c, h, w))
    if kind == "flatten":
        return LayerNode("n", kind), rng.normal(size=(b, *(int(v) for v in rng.integers(1, 4, 3))))
    raise ValueError(kind)


def layer_gradient_error(kind: str, rng: np.random.Generator) -> float:
    """Worst relative error between analytic and numerical gradients of ``sum(R * layer(x))``."""
    node, x = random_layer(kind, rng)
    out, _ = _forward_node(node, x)
    proj = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(proj * _forward_node(node, x)[0]))

    out, cache = _forward_node(node, x)
    dx, pgrads = _backward_node(node, x, out, cache, proj)
    errs = [rel_error(dx, central_difference(loss, x))]
    for name, w in node.params.items():
        errs.append(rel_error(pgrads[name], central_difference(loss, w)))
    return max(errs)


# --------------------------------------------------------------------------
# placement oracle

from shieldkit.placement import HardwareProfile, Option, TensorCost, Unit  # noqa: E402


def random_problem(rng: np.random.Generator, n_linear: int, t_switch=None):
    """Random chain with interleaved non-linear units, random costs and random critical/masked sets."""
    units, tensors = [], []
    for _ in range(int(rng.integers(0, 2))):
        units.append(Unit(f"lead{len(units)}", False))
    for i in range(n_linear):
        tid = f"t{i}"
        units.append(Unit(tid, True))
        for _ in range(int(rng.integers(0, 3))):
            units.append(Unit(f"n{len(units)}", False))
        gpu = None if rng.random() < 0.2 else float(rng.uniform(0.1, 3))
        tensors.append(TensorCost(tid, t_ree_cpu=float(rng.uniform(0.1, 3)), t_tee_cpu=float(rng.uniform(0.1, 4)),
                                  t_ree_gpu=gpu, t_deobf=float(rng.uniform(0, 1)), t_mask=float(rng.uniform(0, 1)),
                                  mem=int(rng.integers(0, 200))))
    ts = float(rng.uniform(0, 2)) if t_switch is None else t_switch
    profile = HardwareProfile(tensors, ts, tee_memory=150)
    ids = [t.id for t in tensors]
    critical = {t for t in ids if rng.random() < 0.5}
    masked = {t for t in ids if rng.random() < 0.4}
    return profile, units, critical, masked


def oracle_objective(profile, units, critical, masked, options) -> float:
    """Latency of an option assignment, derived directly from the placement rules."""
    linear = [u.id for u in units if u.linear]
    worlds, cost, prev_linear = [], 0.0, None
    for k, u in enumerate(units):
        if u.linear:
            opt = options[u.id]
            c = profile[u.id]
            if opt == Option.TEE_CPU:
                cost += c.t_tee_cpu
            else:
                cost += c.t_ree_cpu if opt in (Option.REE_CPU, Option.REE_CPU_OBF) else c.t_ree_gpu
                if opt in (Option.REE_CPU_OBF, Option.REE_GPU_OBF):
                    cost += c.t_deobf + (c.t_mask if prev_linear in masked else 0.0)
            worlds.append("TEE" if opt == Option.TEE_CPU else "REE")
            prev_linear = u.id
        elif prev_linear is None:
            worlds.append("REE")
        else:
            opt = options[prev_linear]
            i = linear.index(prev_linear)
            nxt = options[linear[i + 1]] if i + 1 < len(linear) else None
            shielded = opt != Option.REE_CPU and opt != Option.REE_GPU
            nxt_obf = nxt in (Option.REE_CPU_OBF, Option.REE_GPU_OBF)
            worlds.append("TEE" if shielded or (nxt_obf and prev_linear in masked) else "REE")
    switches = sum(a != b for a, b in zip(worlds, worlds[1:]))
    return cost + switches * profile.t_switch


def oracle_legal(profile, tid, is_critical, prev_masked):
    c = profile[tid]
    opts = [Option.REE_CPU_OBF, Option.REE_GPU_OBF, Option.TEE_CPU] if is_critical else [Option.REE_CPU, Option.REE_GPU]
    if c.t_ree_gpu is None:
        opts = [o for o in opts if o not in (Option.REE_GPU, Option.REE_GPU_OBF)]
    if c.mem > profile.tee_memory:
        opts = [o for o in opts if o != Option.TEE_CPU]
    return opts


def oracle_optimum(profile, units, critical, masked) -> float:
    import itertools
    linear = [u.id for u in units if u.linear]
    choices = [oracle_legal(profile, t, t in critical, None) for t in linear]
    return min(oracle_objective(profile, units, critical, masked, dict(zip(linear, combo)))
               for combo in itertools.product(*choices))


def random_plan(rng: np.random.Generator, graph, profile):
    """A valid plan with random critical/masked sets and a random legal option per tensor."""
    from shieldkit.placement import build_plan, chain_units, legal_options

    ids = graph.linear_ids
    critical = {t for t in ids if rng.random() < 0.5}
    masked = {t for t in ids if rng.random() < 0.5}
    options, prev = {}, None
    for t in ids:
        legal = legal_options(profile[t], t in critical, profile, prev in masked)
        options[t] = legal[int(rng.integers(0, len(legal)))]
        prev = t
    return build_plan(options, chain_units(graph), profile, critical, masked)
