"""Self-collision risk network: forward pass, exact gradients, training,
temperature calibration.

The network fuses an action-token stream (one token per plan step, with
sinusoidal positional encodings) and a two-token context stream (proprio,
scene feature) through single-head cross-attention, then mean-pools and
feeds a small tanh trunk with three linear heads: collision-risk logit,
minimum-clearance regression, and time-to-collision (softplus, capped).

Gradients are analytic and hand-written; the same backward pass produces
both parameter gradients (training) and plan-input gradients (projected
gradient recovery/refinement). Everything runs in float64 numpy, batch-first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

ACTION_DIM = 4
PROPRIO_DIM = 14
VISION_DIM = 10
POS_ENC_DIM = 8
D_MODEL = 32
TTC_CAP = 1.0  # horizon cap on predicted time-to-collision, s (H_max * dt)

CHECKPOINT_VERSION = 1


@dataclass
class RiskPrediction:
    """One network output: calibrated risk, raw logit, clearance, TTC (s)."""

    risk: float
    logit: float
    min_dist: float
    ttc: float


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    epochs_per_phase: int = 10
    lambda_bce: float = 1.0
    lambda_d: float = 1.0
    lambda_ttc: float = 0.5
    w_pos: float = 3.0          # positive-class (missed-collision) upweight
    gamma_early: float = 0.5    # per-second decay: earlier collisions weigh more
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma_early <= 1.0):
            raise ValueError("gamma_early must lie in (0, 1]")
        for name in ("lr", "momentum", "batch_size", "epochs_per_phase", "w_pos"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# (name, shape builder) for every learnable array, in fixed order
def _weight_specs(d: int):
    return [
        ("w_action", (ACTION_DIM + POS_ENC_DIM, d)), ("b_action", (d,)),
        ("w_proprio", (PROPRIO_DIM, d)), ("b_proprio", (d,)),
        ("w_vision", (VISION_DIM, d)), ("b_vision", (d,)),
        ("w_query", (d, d)), ("b_query", (d,)),
        ("w_key", (d, d)), ("b_key", (d,)),
        ("w_value", (d, d)), ("b_value", (d,)),
        ("w_trunk1", (d, d)), ("b_trunk1", (d,)),
        ("w_trunk2", (d, d)), ("b_trunk2", (d,)),
        ("w_risk", (d,)), ("b_risk", ()),
        ("w_dist", (d,)), ("b_dist", ()),
        ("w_ttc", (d,)), ("b_ttc", ()),
    ]


@dataclass
class EstimatorParams:
    """All learnable arrays plus the calibration temperature.

    Treated as immutable once training finishes; any number of workers may
    run inference on a shared instance.
    """

    weights: dict[str, np.ndarray]
    temperature: float = 1.0
    d_model: int = D_MODEL
    ttc_cap: float = TTC_CAP

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(
            weights={k: v.copy() for k, v in self.weights.items()},
            temperature=self.temperature, d_model=self.d_model, ttc_cap=self.ttc_cap,
        )

    def count(self) -> int:
        return int(sum(v.size for v in self.weights.values())) + 1  # + temperature


def init_params(seed: int = 0, d_model: int = D_MODEL, ttc_cap: float = TTC_CAP) -> EstimatorParams:
    """Glorot-uniform weights, zero biases; deterministic given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    weights = {}
    for name, shape in _weight_specs(d_model):
        if name.startswith("b_"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights[name] = rng.uniform(-lim, lim, size=shape)
    return EstimatorParams(weights=weights, d_model=d_model, ttc_cap=ttc_cap)


def positional_encoding(horizon: int, dim: int = POS_ENC_DIM) -> np.ndarray:
    """Interleaved (sin, cos) pairs; pe(0) = (0, 1, 0, 1, ...)."""
    pe = np.empty((horizon, dim))
    pos = np.arange(horizon)[:, None]
    freqs = 1.0 / np.power(10000.0, 2.0 * np.arange(dim // 2) / dim)
    pe[:, 0::2] = np.sin(pos * freqs)
    pe[:, 1::2] = np.cos(pos * freqs)
    return pe


@dataclass
class SampleBatch:
    """Padded, masked arrays for a set of labeled samples.

    plan is (B, H_pad, 4) right-padded with zero rows; mask marks real steps.
    """

    proprio: np.ndarray  # (B, 14)
    z: np.ndarray        # (B, 10)
    plan: np.ndarray     # (B, H_pad, 4)
    mask: np.ndarray     # (B, H_pad), 1.0 for real steps
    y_bin: np.ndarray    # (B,)
    y_d: np.ndarray      # (B,)
    y_ttc: np.ndarray    # (B,)

    def __len__(self) -> int:
        return self.proprio.shape[0]

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(self.proprio[idx], self.z[idx], self.plan[idx],
                           self.mask[idx], self.y_bin[idx], self.y_d[idx], self.y_ttc[idx])


def stack_batch(samples) -> SampleBatch:
    """Pad a list of (proprio, z, plan, y_bin, y_d, y_ttc) tuples or objects
    with those attributes into one SampleBatch."""
    def get(s, name):
        return getattr(s, name) if hasattr(s, name) else s[name]

    plans = [np.asarray(get(s, "plan"), dtype=float).reshape(-1, ACTION_DIM) for s in samples]
    h_pad = max(p.shape[0] for p in plans)
    n = len(samples)
    plan = np.zeros((n, h_pad, ACTION_DIM))
    mask = np.zeros((n, h_pad))
    for i, p in enumerate(plans):
        plan[i, : p.shape[0]] = p
        mask[i, : p.shape[0]] = 1.0
    return SampleBatch(
        proprio=np.array([get(s, "proprio") for s in samples], dtype=float),
        z=np.array([get(s, "z") for s in samples], dtype=float),
        plan=plan, mask=mask,
        y_bin=np.array([get(s, "y_bin") for s in samples], dtype=float),
        y_d=np.array([get(s, "y_d") for s in samples], dtype=float),
        y_ttc=np.array([get(s, "y_ttc") for s in samples], dtype=float),
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_batch(params: EstimatorParams, proprio, z, plan, mask):
    """Batched forward pass; returns (logit, dist, ttc, cache)."""
    w = params.weights
    d = params.d_model
    B, H, _ = plan.shape

    pe = positional_encoding(H)
    U = np.concatenate([plan, np.broadcast_to(pe, (B, H, POS_ENC_DIM))], axis=2)
    act = np.tanh(U @ w["w_action"] + w["b_action"])                     # (B,H,d)
    ctx_p = np.tanh(proprio @ w["w_proprio"] + w["b_proprio"])           # (B,d)
    ctx_v = np.tanh(z @ w["w_vision"] + w["b_vision"])                   # (B,d)
    C = np.stack([ctx_p, ctx_v], axis=1)                                 # (B,2,d)

    Q = act @ w["w_query"] + w["b_query"]                                # (B,H,d)
    K = C @ w["w_key"] + w["b_key"]                                      # (B,2,d)
    V = C @ w["w_value"] + w["b_value"]                                  # (B,2,d)
    scores = Q @ K.transpose(0, 2, 1) / np.sqrt(d)                       # (B,H,2)
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)
    O = attn @ V                                                         # (B,H,d)
    R = O + act
    counts = mask.sum(axis=1)                                            # (B,)
    pooled = (mask[:, :, None] * R).sum(axis=1) / counts[:, None]        # (B,d)

    t1 = np.tanh(pooled @ w["w_trunk1"] + w["b_trunk1"])
    t2 = np.tanh(t1 @ w["w_trunk2"] + w["b_trunk2"])
    logit = t2 @ w["w_risk"] + w["b_risk"]
    dist = t2 @ w["w_dist"] + w["b_dist"]
    ttc_raw = t2 @ w["w_ttc"] + w["b_ttc"]
    ttc_sp = _softplus(ttc_raw)
    ttc = np.minimum(ttc_sp, params.ttc_cap)

    cache = dict(U=U, act=act, ctx_p=ctx_p, ctx_v=ctx_v, C=C, Q=Q, K=K, V=V,
                 attn=attn, pooled=pooled, t1=t1, t2=t2, ttc_raw=ttc_raw,
                 ttc_sp=ttc_sp, mask=mask, counts=counts,
                 proprio=proprio, z=z)
    return logit, dist, ttc, cache


def _backward_batch(params: EstimatorParams, cache, g_logit, g_dist, g_ttc):
    """Exact gradients of any scalar with upstream (g_logit, g_dist, g_ttc).

    Returns (param_grads, plan_grads) where param_grads mirrors
    params.weights and plan_grads is (B, H, 4). One pass serves both
    training (all three upstreams) and plan optimization (logit only).
    """
    w = params.weights
    d = params.d_model
    c = cache
    g = {}

    g_raw = g_ttc * (c["ttc_sp"] < params.ttc_cap) * _sigmoid(c["ttc_raw"])
    g["w_risk"] = c["t2"].T @ g_logit
    g["b_risk"] = np.asarray(g_logit.sum())
    g["w_dist"] = c["t2"].T @ g_dist
    g["b_dist"] = np.asarray(g_dist.sum())
    g["w_ttc"] = c["t2"].T @ g_raw
    g["b_ttc"] = np.asarray(g_raw.sum())
    g_t2 = (g_logit[:, None] * w["w_risk"] + g_dist[:, None] * w["w_dist"]
            + g_raw[:, None] * w["w_ttc"])

    a2 = g_t2 * (1.0 - c["t2"] ** 2)
    g["w_trunk2"] = c["t1"].T @ a2
    g["b_trunk2"] = a2.sum(axis=0)
    g_t1 = a2 @ w["w_trunk2"].T
    a1 = g_t1 * (1.0 - c["t1"] ** 2)
    g["w_trunk1"] = c["pooled"].T @ a1
    g["b_trunk1"] = a1.sum(axis=0)
    g_pooled = a1 @ w["w_trunk1"].T

    g_R = (c["mask"] / c["counts"][:, None])[:, :, None] * g_pooled[:, None, :]
    g_O = g_R
    g_act = g_R.copy()  # residual branch

    g_attn = g_O @ c["V"].transpose(0, 2, 1)                               # (B,H,2)
    g_V = c["attn"].transpose(0, 2, 1) @ g_O                               # (B,2,d)
    attn = c["attn"]
    g_scores = attn * (g_attn - (g_attn * attn).sum(axis=2, keepdims=True))
    g_scores = g_scores / np.sqrt(d)
    g_Q = g_scores @ c["K"]
    g_K = g_scores.transpose(0, 2, 1) @ c["Q"]

    g["w_query"] = np.einsum("bhd,bhe->de", c["act"], g_Q)
    g["b_query"] = g_Q.sum(axis=(0, 1))
    g_act = g_act + g_Q @ w["w_query"].T
    g["w_key"] = np.einsum("bcd,bce->de", c["C"], g_K)
    g["b_key"] = g_K.sum(axis=(0, 1))
    g_C = g_K @ w["w_key"].T
    g["w_value"] = np.einsum("bcd,bce->de", c["C"], g_V)
    g["b_value"] = g_V.sum(axis=(0, 1))
    g_C = g_C + g_V @ w["w_value"].T

    a_p = g_C[:, 0, :] * (1.0 - c["ctx_p"] ** 2)
    g["w_proprio"] = c["proprio"].T @ a_p
    g["b_proprio"] = a_p.sum(axis=0)
    a_v = g_C[:, 1, :] * (1.0 - c["ctx_v"] ** 2)
    g["w_vision"] = c["z"].T @ a_v
    g["b_vision"] = a_v.sum(axis=0)

    g_act_pre = g_act * (1.0 - c["act"] ** 2)
    g["w_action"] = np.einsum("bhu,bhd->ud", c["U"], g_act_pre)
    g["b_action"] = g_act_pre.sum(axis=(0, 1))
    g_U = g_act_pre @ w["w_action"].T
    plan_grads = g_U[:, :, :ACTION_DIM]
    return g, plan_grads


def _as_batch_inputs(proprio, z, plan):
    proprio = np.asarray(proprio, dtype=float)[None, :]
    z = np.asarray(z, dtype=float)[None, :]
    plan_arr = plan.steps if hasattr(plan, "steps") else np.asarray(plan, dtype=float)
    plan_arr = plan_arr[None, :, :]
    mask = np.ones(plan_arr.shape[:2])
    return proprio, z, plan_arr, mask


def tokenize(params: EstimatorParams, proprio, z, plan):
    """Action tokens (H, d) and context tokens (2, d) for one sample."""
    P, Z, A, mask = _as_batch_inputs(proprio, z, plan)
    _, _, _, cache = _forward_batch(params, P, Z, A, mask)
    return cache["act"][0], cache["C"][0]


def forward(params: EstimatorParams, proprio, z, plan) -> RiskPrediction:
    """Uncalibrated prediction (temperature treated as 1)."""
    P, Z, A, mask = _as_batch_inputs(proprio, z, plan)
    logit, dist, ttc, _ = _forward_batch(params, P, Z, A, mask)
    ell = float(logit[0])
    return RiskPrediction(risk=float(_sigmoid(np.array([ell]))[0]), logit=ell,
                          min_dist=float(dist[0]), ttc=float(ttc[0]))


def predict_risk(params: EstimatorParams, proprio, z, plan) -> RiskPrediction:
    """Calibrated prediction: stored temperature applied to the risk logit.

    min_dist and ttc are unaffected by the temperature, and risk ordering
    over any fixed batch is invariant to it (monotone transform).
    """
    pred = forward(params, proprio, z, plan)
    pred.risk = float(_sigmoid(np.array([pred.logit / params.temperature]))[0])
    return pred


def predict_risk_batch(params: EstimatorParams, proprio, z, plans: np.ndarray):
    """Calibrated predictions for many plans sharing one (proprio, z).

    plans is (N, H, 4); returns (risk, logit, dist, ttc) arrays of length N.
    """
    n = plans.shape[0]
    P = np.broadcast_to(np.asarray(proprio, dtype=float), (n, PROPRIO_DIM))
    Z = np.broadcast_to(np.asarray(z, dtype=float), (n, VISION_DIM))
    mask = np.ones(plans.shape[:2])
    logit, dist, ttc, _ = _forward_batch(params, P, Z, plans, mask)
    return _sigmoid(logit / params.temperature), logit, dist, ttc


def risk_plan_gradient(params: EstimatorParams, proprio, z, plan):
    """(prediction, d logit / d plan) for one sample.

    The gradient is of the uncalibrated risk logit, which shares its descent
    directions with the calibrated probability (temperature is a positive
    monotone reparameterization).
    """
    P, Z, A, mask = _as_batch_inputs(proprio, z, plan)
    logit, dist, ttc, cache = _forward_batch(params, P, Z, A, mask)
    _, plan_grads = _backward_batch(params, cache, np.ones(1), np.zeros(1), np.zeros(1))
    ell = float(logit[0])
    pred = RiskPrediction(risk=float(_sigmoid(np.array([ell / params.temperature]))[0]),
                          logit=ell, min_dist=float(dist[0]), ttc=float(ttc[0]))
    return pred, plan_grads[0]


def _bce_from_logit(logit, y):
    # stable: max(l,0) - l*y + log(1 + exp(-|l|))
    return np.maximum(logit, 0.0) - logit * y + np.log1p(np.exp(-np.abs(logit)))


def _sample_weights(y_bin, y_ttc, cfg: TrainConfig):
    w_cls = np.where(y_bin > 0.5, cfg.w_pos, 1.0)
    w_early = np.where(y_bin > 0.5, np.power(cfg.gamma_early, y_ttc), 1.0)
    return w_cls * w_early


def loss(pred: RiskPrediction, label, cfg: TrainConfig):
    """Composite loss for one sample: (total, parts).

    parts carries the unweighted-by-lambda pieces, so
    total = lambda_bce * parts['bce'] + lambda_d * parts['dist']
          + lambda_ttc * parts['ttc'] exactly. The BCE part already includes
    the positive-class and early-collision weights; the TTC part is masked
    to collision samples (censored negatives carry no TTC signal). BCE is
    evaluated on the uncalibrated probability.
    """
    if not all(np.isfinite([pred.logit, pred.min_dist, pred.ttc])):
        raise ValueError("non-finite prediction")
    y_bin = float(getattr(label, "y_bin"))
    y_d = float(getattr(label, "y_d"))
    y_ttc = float(getattr(label, "y_ttc"))
    wgt = float(_sample_weights(np.array([y_bin]), np.array([y_ttc]), cfg)[0])
    parts = {
        "bce": wgt * float(_bce_from_logit(np.array([pred.logit]), np.array([y_bin]))[0]),
        "dist": (pred.min_dist - y_d) ** 2,
        "ttc": y_bin * abs(pred.ttc - y_ttc),
    }
    total = cfg.lambda_bce * parts["bce"] + cfg.lambda_d * parts["dist"] + cfg.lambda_ttc * parts["ttc"]
    return total, parts


def _batch_loss_and_grads(params: EstimatorParams, batch: SampleBatch, cfg: TrainConfig):
    """Mean loss over the batch plus exact gradients (params and plans)."""
    logit, dist, ttc, cache = _forward_batch(params, batch.proprio, batch.z,
                                             batch.plan, batch.mask)
    n = len(batch)
    y = batch.y_bin
    wgt = _sample_weights(y, batch.y_ttc, cfg)
    bce = wgt * _bce_from_logit(logit, y)
    dist_term = (dist - batch.y_d) ** 2
    ttc_term = y * np.abs(ttc - batch.y_ttc)
    total = float(np.mean(cfg.lambda_bce * bce + cfg.lambda_d * dist_term
                          + cfg.lambda_ttc * ttc_term))

    g_logit = cfg.lambda_bce * wgt * (_sigmoid(logit) - y) / n
    g_dist = cfg.lambda_d * 2.0 * (dist - batch.y_d) / n
    g_ttc = cfg.lambda_ttc * y * np.sign(ttc - batch.y_ttc) / n
    param_grads, plan_grads = _backward_batch(params, cache, g_logit, g_dist, g_ttc)
    return total, param_grads, plan_grads


def grad(params: EstimatorParams, batch: SampleBatch, cfg: TrainConfig):
    """Exact gradients of the mean batch loss.

    Returns (param_grads, plan_grads): a dict congruent to params.weights
    and a (B, H, 4) array of per-sample plan-input gradients.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, param_grads, plan_grads = _batch_loss_and_grads(params, batch, cfg)
    return param_grads, plan_grads


def train(dataset_phases, cfg: TrainConfig,
          params: EstimatorParams | None = None) -> EstimatorParams:
    """SGD with momentum over curriculum phases in increasing-horizon order.

    Each phase is a SampleBatch (shorter plans already right-padded with a
    mask). Shuffle order is fixed by cfg.seed, so identical inputs give
    identical weights. Raises RuntimeError if the loss goes non-finite.
    """
    phases = sorted(dataset_phases, key=lambda b: int(b.mask.sum(axis=1).max()) if len(b) else 0)
    if params is None:
        params = init_params(cfg.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 11]))
    velocity = {k: np.zeros_like(v) for k, v in params.weights.items()}

    for batch_all in phases:
        n = len(batch_all)
        if n == 0:
            continue
        for _ in range(cfg.epochs_per_phase):
            order = rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                sub = batch_all.take(order[lo: lo + cfg.batch_size])
                total, grads, _ = _batch_loss_and_grads(params, sub, cfg)
                if not np.isfinite(total):
                    raise RuntimeError(f"training diverged: loss={total}")
                for k, gk in grads.items():
                    velocity[k] = cfg.momentum * velocity[k] - cfg.lr * gk
                    params.weights[k] = params.weights[k] + velocity[k]
    return params


def heldout_nll(params: EstimatorParams, batch: SampleBatch, temperature: float) -> float:
    """Mean BCE of sigmoid(logit / T) against y_bin (no class weights)."""
    logit, _, _, _ = _forward_batch(params, batch.proprio, batch.z, batch.plan, batch.mask)
    return float(np.mean(_bce_from_logit(logit / temperature, batch.y_bin)))


def calibrate_temperature(params: EstimatorParams, heldout: SampleBatch,
                          lo: float = 0.25, hi: float = 4.0, iters: int = 40) -> float:
    """Fit the temperature on held-out data by golden-section search.

    Minimizes held-out NLL over T in [lo, hi]; the result never exceeds the
    NLL at T=1 (T=1 wins any tie), so calibration cannot hurt. Stores T on
    params and returns it. Raises ValueError on a single-class held-out set.
    """
    y = heldout.y_bin
    if not (np.any(y > 0.5) and np.any(y < 0.5)):
        raise ValueError("held-out set must contain both classes")
    logit, _, _, _ = _forward_batch(params, heldout.proprio, heldout.z,
                                    heldout.plan, heldout.mask)

    def nll(t):
        return float(np.mean(_bce_from_logit(logit / t, y)))

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = nll(c), nll(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = nll(d)
    t_star = (a + b) / 2.0
    if nll(1.0) <= nll(t_star):
        t_star = 1.0
    params.temperature = float(t_star)
    return params.temperature


def save_params(params: EstimatorParams, path, config_digest: str = "") -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "risk_estimator",
        "dims": {
            "d_model": params.d_model,
            "action": ACTION_DIM, "proprio": PROPRIO_DIM, "vision": VISION_DIM,
            "pos_enc": POS_ENC_DIM,
        },
        "shapes": {k: list(v.shape) for k, v in params.weights.items()},
        "weights": {k: v.ravel().tolist() for k, v in params.weights.items()},
        "temperature": params.temperature,
        "ttc_cap": params.ttc_cap,
        "config_digest": config_digest,
    }
    with open(path, "w") as f:
        json.dump(payload, f)
        f.write("\n")


def load_params(path) -> EstimatorParams:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("kind") != "risk_estimator":
        raise ValueError(f"not a risk estimator checkpoint: kind={payload.get('kind')!r}")
    weights = {
        k: np.array(payload["weights"][k], dtype=float).reshape(payload["shapes"][k])
        for k in payload["weights"]
    }
    return EstimatorParams(weights=weights, temperature=float(payload["temperature"]),
                           d_model=int(payload["dims"]["d_model"]),
                           ttc_cap=float(payload["ttc_cap"]))
