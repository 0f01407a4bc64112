"""Risk evaluators: contrastive risk and its mutual-information limit,
zero-shot classification, conditional denoising, next-token divergence, and
the matched/mismatched-model comparison.

Monte-Carlo estimators consume counter-based streams keyed by purpose and
chunk index, so results are bit-reproducible and independent of evaluation
order. Reports carry the estimate, its standard error (0 for exact values)
and the sample count.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .bp import bayes_denoiser, next_token_posteriors_parallel, root_posterior
from .model import JghmModel, ModelError
from .oracle import (
    DEFAULT_BUDGET,
    JointTable,
    encoder_fibers,
    enumerate_joint,
    exact_suff_encoder,
    score_matrix,
)
from .rng import stream
from .sampler import NoisyImage, sample_joint_batch, sample_marginal_leaves, sample_text_for_class
from .encoders import exact_score

__all__ = [
    "RiskReport",
    "CSV_COLUMNS",
    "clip_risk",
    "clip_excess_and_mi_limit",
    "zsc_predict",
    "zsc_kl",
    "zsc_kl_sweep",
    "zsc_infinite_sample_predict",
    "cdm_estimation_error",
    "vlm_divergence",
    "misspec_bp_eval",
    "MisspecResult",
]

CHUNK = 1024
CSV_COLUMNS = ["name", "estimate", "se", "n", "K", "M", "t", "p_flip_train", "p_flip_test", "seed"]


@dataclass(frozen=True)
class RiskReport:
    """One labeled scalar metric with its Monte-Carlo precision."""

    name: str
    estimate: float
    se: float
    n: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.se < 0:
            raise ModelError("standard error must be >= 0")
        if self.n < 1:
            raise ModelError("sample count must be >= 1")

    def csv_row(self) -> list:
        row = [self.name, repr(float(self.estimate)), repr(float(self.se)), str(self.n)]
        for key in CSV_COLUMNS[4:]:
            value = self.metadata.get(key, "")
            row.append("" if value == "" else repr(value) if isinstance(value, float) else str(value))
        return row


def _mean_se(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    n = len(values)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def _chunks(n: int, size: int = CHUNK):
    for c, lo in enumerate(range(0, n, size)):
        yield c, lo, min(lo + size, n)


def _logsumexp(a: np.ndarray, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


# ---------------------------------------------------------------------------
# Contrastive risk
# ---------------------------------------------------------------------------


def _score_features(score, modality: str, leaves: np.ndarray, cache: dict) -> np.ndarray:
    """Score features with one shared posterior computation per (model,
    modality) among posterior-based scores."""
    if score.posterior_transform(modality) is None or score.posterior_model is None:
        return score.features(modality, leaves)
    key = (id(score.posterior_model), modality)
    if key not in cache:
        cache[key] = root_posterior(score.posterior_model, modality, leaves)
    return score.features_from_posterior(modality, cache[key])


def _contrastive_losses(data_model: JghmModel, scores, K: int, n: int, seed: int, purpose: str):
    """Per-batch InfoNCE losses for each score on common batches: (n, len(scores)).

    The positive pair comes from the joint; each negative side is a fresh
    marginal draw (the same law as discarding one side of an independent
    joint sample).
    """
    d_im, d_tx = data_model.topology.d_im, data_model.topology.d_tx
    losses = np.empty((n, len(scores)))
    for c, lo, hi in _chunks(n):
        B = hi - lo
        rng = stream(seed, purpose, K, c)
        pos = sample_joint_batch(data_model, B, rng)
        neg_im = sample_marginal_leaves(data_model, "im", B * (K - 1), rng)
        neg_tx = sample_marginal_leaves(data_model, "tx", B * (K - 1), rng)
        images = np.concatenate([pos.x_im[:, None, :], neg_im.reshape(B, K - 1, d_im)], axis=1)
        texts = np.concatenate([pos.x_tx[:, None, :], neg_tx.reshape(B, K - 1, d_tx)], axis=1)
        cache = {}
        for k, score in enumerate(scores):
            f_im = _score_features(score, "im", images, cache)
            f_tx = _score_features(score, "tx", texts, cache)
            logits_tx = score.from_features(f_im[:, :1], f_tx)  # (B, K)
            logits_im = score.from_features(f_im, f_tx[:, :1])
            p = logits_tx[:, 0]
            losses[lo:hi, k] = (_logsumexp(logits_tx) - p) + (_logsumexp(logits_im) - p)
    return losses


def clip_risk(model: JghmModel, score, K: int, n: int, seed: int) -> RiskReport:
    """Monte-Carlo estimate of the symmetric InfoNCE risk at batch size K.

    Constant scores short-circuit to the exact value 2 log K.
    """
    if K < 2 or n < 1:
        raise ModelError("clip_risk needs K >= 2 and n >= 1")
    meta = {"K": K, "seed": seed, "score": score.name}
    if getattr(score, "is_constant", False):
        return RiskReport("clip_risk", 2.0 * math.log(K), 0.0, n, meta)
    losses = _contrastive_losses(model, [score], K, n, seed, "clip-risk")[:, 0]
    est, se = _mean_se(losses)
    return RiskReport("clip_risk", est, se, n, meta)


def clip_excess_and_mi_limit(model: JghmModel, score, K_list, n: int, seed: int):
    """For each K: the shifted optimal risk -R*/2 + log K (the MI estimate)
    and the excess risk of `score` over the optimal score on common batches.

    Returns a list of RiskReports: ('mi_limit', K) and ('clip_excess', K).
    """
    star = exact_score(model)
    reports = []
    for K in K_list:
        losses = _contrastive_losses(model, [star, score], K, n, seed, "clip-excess")
        mi_est = math.log(K) - 0.5 * float(losses[:, 0].mean())
        mi_se = 0.5 * float(losses[:, 0].std(ddof=1) / math.sqrt(n))
        reports.append(
            RiskReport("mi_limit", mi_est, mi_se, n, {"K": K, "seed": seed, "score": star.name})
        )
        diff = losses[:, 1] - losses[:, 0]
        est, se = _mean_se(diff)
        reports.append(
            RiskReport("clip_excess", est, se, n, {"K": K, "seed": seed, "score": score.name})
        )
    return reports


# ---------------------------------------------------------------------------
# Zero-shot classification (labels are root states)
# ---------------------------------------------------------------------------


def _zsc_predict_batch(class_model: JghmModel, score, images: np.ndarray, M: int, rng):
    """Predicted class distribution (B, S) from M class-conditioned texts.

    Classes with all -inf aggregated scores receive zero mass.
    """
    S = class_model.n_states
    B = images.shape[0]
    f_im = score.features("im", images)  # (B, p)
    logits = np.empty((B, S))
    log_prior = np.log(class_model.root_prior)
    for y in range(1, S + 1):
        texts = sample_text_for_class(class_model, y, rng, size=B * M).reshape(B, M, -1)
        f_tx = score.features("tx", texts)  # (B, M, p)
        pair = score.from_features(f_im[:, None, :], f_tx)  # (B, M)
        logits[:, y - 1] = _logsumexp(pair) - math.log(M) + log_prior[y - 1]
    m = logits.max(axis=1, keepdims=True)
    if not np.all(m > -np.inf):
        raise ModelError("every class has zero aggregated score mass")
    p = np.exp(logits - m)
    return p / p.sum(axis=1, keepdims=True)


def zsc_predict(model: JghmModel, score, x_im: np.ndarray, M: int, rng) -> np.ndarray:
    """Class posterior for one image from the aggregated-score classifier."""
    if M < 1:
        raise ModelError("zsc_predict needs M >= 1")
    return _zsc_predict_batch(model, score, np.asarray(x_im)[None, :], M, rng)[0]


def zsc_infinite_sample_predict(model: JghmModel, score, x_im, table: JointTable = None) -> np.ndarray:
    """Analytic M -> infinity limit of the classifier, by enumeration."""
    if table is None:
        table = enumerate_joint(model)
    scores = score_matrix(score, table)[int(table.index("im", x_im))]
    w = np.exp(scores - scores.max()) * table.p_tx
    joint_ty = table.prior[:, None] * table.cond_tx  # (S, N_tx): P(y, x_tx)
    with np.errstate(invalid="ignore"):
        cls_given_tx = joint_ty / table.p_tx
    num = (w[None, :] * np.nan_to_num(cls_given_tx)).sum(axis=1)
    return num / w.sum()


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros(p.shape[0])
    for i in range(p.shape[0]):
        sup = p[i] > 0
        if np.any(q[i][sup] == 0):
            out[i] = np.inf
        else:
            out[i] = max(float(np.sum(p[i][sup] * np.log(p[i][sup] / q[i][sup]))), 0.0)
    return out


def zsc_kl(model: JghmModel, score, M: int, n: int, seed: int) -> RiskReport:
    """E_x KL(P(y | x_im) || predicted class distribution), MC over images."""
    reports = zsc_kl_sweep(model, score, [M], n, seed)
    return reports[0]


def zsc_kl_sweep(model: JghmModel, score, M_list, n: int, seed: int):
    """KL risk across an M sweep with nested text samples.

    The same images serve every M, and the texts for smaller M are prefixes
    of the largest draw, so the sweep is maximally paired.
    """
    M_list = list(M_list)
    M_max = max(M_list)
    S = model.n_states
    log_prior = np.log(model.root_prior)
    kls = {M: np.empty(n) for M in M_list}
    chunk = max(1, min(CHUNK, 65536 // max(1, M_max)))
    for c, lo, hi in _chunks(n, chunk):
        B = hi - lo
        rng_img = stream(seed, "zsc-images", c)
        images = sample_joint_batch(model, B, rng_img).x_im
        truth = root_posterior(model, "im", images)
        f_im = score.features("im", images)
        rng_tx = stream(seed, "zsc-texts", M_max, c)
        pair = np.empty((B, S, M_max))
        for y in range(1, S + 1):
            texts = sample_text_for_class(model, y, rng_tx, size=B * M_max).reshape(B, M_max, -1)
            f_tx = score.features("tx", texts)
            pair[:, y - 1, :] = score.from_features(f_im[:, None, :], f_tx)
        for M in M_list:
            logits = _logsumexp(pair[:, :, :M], axis=-1) - math.log(M) + log_prior
            m = logits.max(axis=1, keepdims=True)
            p = np.exp(logits - m)
            p /= p.sum(axis=1, keepdims=True)
            kls[M][lo:hi] = _kl_rows(truth, p)
    reports = []
    for M in M_list:
        est, se = _mean_se(kls[M])
        reports.append(
            RiskReport("zsc_kl", est, se, n, {"M": M, "seed": seed, "score": score.name})
        )
    return reports


# ---------------------------------------------------------------------------
# Conditional denoising
# ---------------------------------------------------------------------------


def cdm_estimation_error(model: JghmModel, encoder, t: float = 1.0, n: int = 100_000,
                         seed: int = 0, table: JointTable = None,
                         budget: int = DEFAULT_BUDGET) -> RiskReport:
    """(1/d_im) E || m*(z_t, x_tx) - E[x_im | z_t, encoder(x_tx)] ||^2.

    The encoder-restricted denoiser is computed exactly by fiber averaging
    over the enumerated joint; the outer expectation is Monte Carlo. The
    metadata carries the bound 2 S^2 Suff(encoder).
    """
    if table is None:
        table = enumerate_joint(model, budget)
    topo = model.topology
    ids, n_fibers = encoder_fibers(encoder, table.tuples_tx)
    onehot = np.zeros((len(ids), n_fibers))
    onehot[np.arange(len(ids)), ids] = 1.0
    im_fiber = table.joint @ onehot  # (N_im, F): P(x_im = i, fiber = f)
    x_all = table.tuples_im.astype(float)  # (N_im, d_im)
    suff = exact_suff_encoder(model, encoder, "tx", table)

    errs = np.empty(n)
    for c, lo, hi in _chunks(n):
        B = hi - lo
        rng = stream(seed, "cdm", c)
        draws = sample_joint_batch(model, B, rng)
        g = rng.standard_normal((B, topo.d_im))
        z = t * draws.x_im.astype(float) + math.sqrt(t) * g
        m_star = bayes_denoiser(model, NoisyImage(t=t, z=z), draws.x_tx)
        f = ids[table.index("tx", draws.x_tx)]
        with np.errstate(divide="ignore"):
            logw = np.log(im_fiber[:, f].T)  # (B, N_im)
        if t > 0:
            logw = logw + z @ x_all.T - t * np.sum(x_all**2, axis=1) / 2.0
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        m_hat = w @ x_all
        errs[lo:hi] = ((m_star - m_hat) ** 2).mean(axis=1)
    est, se = _mean_se(errs)
    bound = 2.0 * model.n_states**2 * suff
    return RiskReport(
        "cdm_estimation_error", est, se, n,
        {"t": t, "seed": seed, "encoder": encoder.name, "suff": suff, "bound": bound},
    )


# ---------------------------------------------------------------------------
# Next-token divergence
# ---------------------------------------------------------------------------


def _prefix_codes(tuples: np.ndarray, n_states: int):
    """Per position p: (prefix index of each tuple, current 0-based token)."""
    out = []
    codes = np.zeros(len(tuples), dtype=np.int64)
    for p in range(tuples.shape[1]):
        out.append((codes.copy(), tuples[:, p] - 1))
        codes = codes * n_states + (tuples[:, p] - 1)
    return out


def _token_mass(weights: np.ndarray, codes, tokens, n_prefix: int, S: int) -> np.ndarray:
    mass = np.zeros((n_prefix, S))
    np.add.at(mass, (codes, tokens), weights)
    return mass


def vlm_divergence(model: JghmModel, encoder, table: JointTable = None,
                   budget: int = DEFAULT_BUDGET) -> RiskReport:
    """Summed next-token KL between the true predictor and the
    encoder-restricted predictor, computed exactly by enumeration.

    D = E sum_i KL( P(x_tx,i | x_im, prefix) || P(x_tx,i | encoder(x_im), prefix) ).
    """
    if table is None:
        table = enumerate_joint(model, budget)
    S = model.n_states
    d_tx = model.topology.d_tx
    ids, n_fibers = encoder_fibers(encoder, table.tuples_im)
    fiber_joint = np.zeros((n_fibers, table.joint.shape[1]))
    np.add.at(fiber_joint, ids, table.joint)
    positions = _prefix_codes(table.tuples_tx, S)
    suff = exact_suff_encoder(model, encoder, "im", table)

    fiber_mass = []
    for p, (codes, tokens) in enumerate(positions):
        n_prefix = S**p
        fiber_mass.append(
            np.stack([_token_mass(fiber_joint[f], codes, tokens, n_prefix, S) for f in range(n_fibers)])
        )

    total = 0.0
    p_im = table.p_im
    for i in range(len(p_im)):
        if p_im[i] == 0:
            continue
        w = table.joint[i]
        for p, (codes, tokens) in enumerate(positions):
            tm = _token_mass(w, codes, tokens, S**p, S)
            rows = tm.sum(axis=1, keepdims=True)
            fm = fiber_mass[p][ids[i]]
            frows = fm.sum(axis=1, keepdims=True)
            sup = tm > 0
            if np.any(fm[sup] == 0):
                total = np.inf
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                log_true = np.where(sup, np.log(tm / rows), 0.0)
                log_hat = np.where(sup, np.log(fm / frows), 0.0)
            total += float(np.sum(tm[sup] * (log_true[sup] - log_hat[sup])))
        if np.isinf(total):
            break
    n_pairs = int(np.count_nonzero(table.joint))
    total = max(total, 0.0)
    return RiskReport(
        "vlm_divergence", total, 0.0, max(n_pairs, 1),
        {"encoder": encoder.name, "suff": suff},
    )


# ---------------------------------------------------------------------------
# Matched vs mismatched model evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MisspecResult:
    """Risk of the train-model predictor on test data, and its paired excess
    over the matched-model (Bayes) predictor."""

    risk: RiskReport
    excess: RiskReport


def _tag(meta, train_model, test_model, seed):
    out = dict(meta)
    out["p_flip_train"] = train_model.metadata.get("p_flip", "")
    out["p_flip_test"] = test_model.metadata.get("p_flip", "")
    out["seed"] = seed
    return out


def misspec_bp_eval(train_model: JghmModel, test_model: JghmModel, task: str,
                    n: int = 100_000, seed: int = 0, K: int = 8,
                    t: float = 1.0) -> MisspecResult:
    """Evaluate exact inference parameterized by `train_model` on data drawn
    from `test_model`, with the matched-model predictor as the paired
    baseline. Supported tasks: 'clip', 'zsc', 'cdm', 'vlm'.

    All predictor randomness shares stream keys across the two predictors,
    so at train == test the excess is identically zero.
    """
    if task == "clip":
        losses = _contrastive_losses(
            test_model, [exact_score(test_model), exact_score(train_model)], K, n, seed,
            "misspec-clip",
        )
        risk_est, risk_se = _mean_se(losses[:, 1])
        exc_est, exc_se = _mean_se(losses[:, 1] - losses[:, 0])
        meta = _tag({"K": K}, train_model, test_model, seed)
        return MisspecResult(
            RiskReport("clip_risk", risk_est, risk_se, n, meta),
            RiskReport("clip_excess", exc_est, exc_se, n, meta),
        )

    if task == "zsc":
        # Bayes-optimal class prediction is the root posterior itself; the
        # mismatched predictor runs the same inference with the train kernels.
        nll_train = np.empty(n)
        nll_test = np.empty(n)
        for c, lo, hi in _chunks(n):
            B = hi - lo
            draws = sample_joint_batch(test_model, B, stream(seed, "misspec-zsc-data", c))
            idx = (np.arange(B), draws.root - 1)
            with np.errstate(divide="ignore"):
                nll_train[lo:hi] = -np.log(root_posterior(train_model, "im", draws.x_im)[idx])
                nll_test[lo:hi] = -np.log(root_posterior(test_model, "im", draws.x_im)[idx])
        risk_est, risk_se = _mean_se(nll_train)
        exc_est, exc_se = _mean_se(nll_train - nll_test)
        meta = _tag({}, train_model, test_model, seed)
        return MisspecResult(
            RiskReport("zsc_logloss", risk_est, risk_se, n, meta),
            RiskReport("zsc_excess", exc_est, exc_se, n, meta),
        )

    if task == "cdm":
        d_im = test_model.topology.d_im
        risk = np.empty(n)
        diff = np.empty(n)
        for c, lo, hi in _chunks(n):
            B = hi - lo
            rng = stream(seed, "misspec-cdm", c)
            draws = sample_joint_batch(test_model, B, rng)
            g = rng.standard_normal((B, d_im))
            x = draws.x_im.astype(float)
            noisy = NoisyImage(t=t, z=t * x + math.sqrt(t) * g)
            m_train = bayes_denoiser(train_model, noisy, draws.x_tx)
            m_test = bayes_denoiser(test_model, noisy, draws.x_tx)
            risk[lo:hi] = ((x - m_train) ** 2).mean(axis=1)
            diff[lo:hi] = risk[lo:hi] - ((x - m_test) ** 2).mean(axis=1)
        risk_est, risk_se = _mean_se(risk)
        exc_est, exc_se = _mean_se(diff)
        meta = _tag({"t": t}, train_model, test_model, seed)
        return MisspecResult(
            RiskReport("cdm_risk", risk_est, risk_se, n, meta),
            RiskReport("cdm_excess", exc_est, exc_se, n, meta),
        )

    if task == "vlm":
        d_tx = test_model.topology.d_tx
        risk = np.empty(n)
        diff = np.empty(n)
        for c, lo, hi in _chunks(n):
            B = hi - lo
            rng = stream(seed, "misspec-vlm", c)
            draws = sample_joint_batch(test_model, B, rng)
            nlls = []
            for model in (train_model, test_model):
                post = next_token_posteriors_parallel(model, draws.x_im, draws.x_tx)
                tok = np.take_along_axis(
                    post, (draws.x_tx - 1)[..., None], axis=-1
                )[..., 0]
                with np.errstate(divide="ignore"):
                    nlls.append(-np.log(tok).mean(axis=-1))
            risk[lo:hi] = nlls[0]
            diff[lo:hi] = nlls[0] - nlls[1]
        risk_est, risk_se = _mean_se(risk)
        exc_est, exc_se = _mean_se(diff)
        meta = _tag({}, train_model, test_model, seed)
        return MisspecResult(
            RiskReport("vlm_risk", risk_est, risk_se, n, meta),
            RiskReport("vlm_excess", exc_est, exc_se, n, meta),
        )

    raise ModelError(f"unknown task {task!r}; expected clip, zsc, cdm or vlm")
