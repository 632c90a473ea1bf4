"""Hand-written reverse-mode gradients for the training path.

Training and gradient checking run at float64 on batched full sequences
(no KV cache); the streaming engine stays float32. The forward here is
the same architecture as `model.forward_step` expressed over a batch,
and the backward visits every weight, including adapter factors.

Masked attention entries have probability exactly 0, so their score
gradients are exactly 0 as well; the leakage guarantees downstream rest
on that exactness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .model import LayerWeights, Weights
from .numerics import gelu, gelu_grad

LN_EPS = 1e-5


@dataclass
class TrainBatch:
    """One batch of full sequences sharing a layout.

    embeds:   (b, s, d) input embeddings, position rows not yet added
    positions: (s,) absolute positions (shared)
    mask:     (s, s) boolean allow-matrix (shared)
    loss_pos: (b, q) columns where next-token loss applies
    targets:  (b, q) target token ids at those columns
    tok_map:  (b, s) source token id of each row, -1 if not from the
              token table (used to scatter input-row gradients back)
    stub_scatter: weighted links from embedding rows to frame-symbol
              stub rows, as (batch_idx, seq_idx, symbol, coeff) arrays;
              a mean-pooled carrier links to each of its N row symbols
              with coeff 1/N
    """

    embeds: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    loss_pos: np.ndarray
    targets: np.ndarray
    tok_map: np.ndarray | None = None
    stub_scatter: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, dict]:
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = xc * inv_std
    return x_hat * g + b, {"x_hat": x_hat, "inv_std": inv_std}


def _ln_backward(dy: np.ndarray, g: np.ndarray, cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, inv_std = cache["x_hat"], cache["inv_std"]
    d_g = (dy * x_hat).reshape(-1, dy.shape[-1]).sum(axis=0)
    d_b = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = inv_std * (
        dxh
        - dxh.mean(axis=-1, keepdims=True)
        - x_hat * (dxh * x_hat).mean(axis=-1, keepdims=True)
    )
    return dx, d_g, d_b


def _proj_forward(
    x: np.ndarray, w: np.ndarray, lw: LayerWeights, name: str
) -> tuple[np.ndarray, dict]:
    y = x @ w
    cache = {"x": x}
    if lw.adapters is not None and name in lw.adapters:
        a, b = lw.adapters[name]
        xa = x @ a
        y = y + xa @ b
        cache["xa"] = xa
    return y, cache


def _proj_backward(
    dy: np.ndarray, w: np.ndarray, lw: LayerWeights, name: str, cache: dict, grads: dict, prefix: str
) -> np.ndarray:
    x = cache["x"]
    d = x.shape[-1]
    k = dy.shape[-1]
    grads[prefix + name] = x.reshape(-1, d).T @ dy.reshape(-1, k)
    dx = dy @ w.T
    if lw.adapters is not None and name in lw.adapters:
        a, b = lw.adapters[name]
        xa = cache["xa"]
        r = a.shape[1]
        grads[prefix + f"adapters.{name}.b"] = xa.reshape(-1, r).T @ dy.reshape(-1, k)
        dxa = dy @ b.T
        grads[prefix + f"adapters.{name}.a"] = x.reshape(-1, d).T @ dxa.reshape(-1, r)
        dx = dx + dxa @ a.T
    return dx


def forward_train(
    weights: Weights, batch: TrainBatch, want_tape: bool = True
) -> tuple[np.ndarray, list[dict] | None, np.ndarray]:
    """Batched float64 forward. Returns (logits (b,s,V), tape, x0)."""
    config = weights.config
    b, s, d = batch.embeds.shape
    if d != config.d_model:
        raise ShapeError(f"embeddings have width {d}, model wants {config.d_model}")
    if batch.mask.shape != (s, s):
        raise ShapeError(f"mask {batch.mask.shape}, expected ({s}, {s})")
    if not batch.mask.any(axis=1).all():
        raise DegenerateInputError("mask has a query row with no allowed key")
    heads, dk = config.heads, config.head_dim
    scale = 1.0 / np.sqrt(dk)

    x = batch.embeds + weights.pos_emb[batch.positions]
    x0 = x
    tape: list[dict] | None = [] if want_tape else None

    for lw in weights.layers:
        rec: dict = {"x_in": x} if want_tape else {}
        a_in, ln1_cache = _ln_forward(x, lw.ln1_g, lw.ln1_b)
        q, q_cache = _proj_forward(a_in, lw.wq, lw, "wq")
        k, k_cache = _proj_forward(a_in, lw.wk, lw, "wk")
        v, v_cache = _proj_forward(a_in, lw.wv, lw, "wv")
        qh = q.reshape(b, s, heads, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(b, s, heads, dk).transpose(0, 2, 1, 3)
        vh = v.reshape(b, s, heads, dk).transpose(0, 2, 1, 3)
        scores = np.where(batch.mask, qh @ kh.transpose(0, 1, 3, 2) * scale, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        oh = probs @ vh
        o = oh.transpose(0, 2, 1, 3).reshape(b, s, heads * dk)
        attn, o_cache = _proj_forward(o, lw.wo, lw, "wo")
        x1 = x + attn
        f_in, ln2_cache = _ln_forward(x1, lw.ln2_g, lw.ln2_b)
        h_pre = f_in @ lw.w1
        h = gelu(h_pre)
        x = x1 + h @ lw.w2
        if want_tape:
            rec.update(
                ln1=ln1_cache, q_cache=q_cache, k_cache=k_cache, v_cache=v_cache,
                qh=qh, kh=kh, vh=vh, probs=probs, o_cache=o_cache,
                x1=x1, ln2=ln2_cache, f_in=f_in, h_pre=h_pre, h=h,
            )
            tape.append(rec)

    logits = x @ weights.unembed
    if want_tape:
        tape.append({"x_final": x})
    return logits, tape, x0


def backward(
    weights: Weights, batch: TrainBatch, tape: list[dict], dlogits: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse pass. Returns (grads by parameter path, d input-embeddings).

    Grads cover every layer weight, adapters, pos_emb, and unembed; the
    token-table gradient is the caller's scatter of the returned
    d-embeddings (the rows are the table rows).
    """
    config = weights.config
    b, s, d = batch.embeds.shape
    heads, dk = config.heads, config.head_dim
    scale = 1.0 / np.sqrt(dk)
    grads: dict[str, np.ndarray] = {}

    x_final = tape[-1]["x_final"]
    grads["unembed"] = x_final.reshape(-1, d).T @ dlogits.reshape(-1, config.vocab_size)
    dx = dlogits @ weights.unembed.T

    for layer in range(config.layers - 1, -1, -1):
        lw = weights.layers[layer]
        rec = tape[layer]
        prefix = f"layers.{layer}."

        # feed-forward block: x_out = x1 + gelu(f_in @ w1) @ w2
        dh = dx @ lw.w2.T
        grads[prefix + "w2"] = rec["h"].reshape(-1, config.ff_dim).T @ dx.reshape(-1, d)
        dh_pre = dh * gelu_grad(rec["h_pre"])
        grads[prefix + "w1"] = rec["f_in"].reshape(-1, d).T @ dh_pre.reshape(-1, config.ff_dim)
        d_f_in = dh_pre @ lw.w1.T
        d_x1_ln, d_g2, d_b2 = _ln_backward(d_f_in, lw.ln2_g, rec["ln2"])
        grads[prefix + "ln2_g"] = d_g2
        grads[prefix + "ln2_b"] = d_b2
        dx1 = dx + d_x1_ln

        # attention block: x1 = x_in + proj_o(attn(ln1(x_in)))
        do = _proj_backward(dx1, lw.wo, lw, "wo", rec["o_cache"], grads, prefix)
        doh = do.reshape(b, s, heads, dk).transpose(0, 2, 1, 3)
        probs, qh, kh, vh = rec["probs"], rec["qh"], rec["kh"], rec["vh"]
        dprobs = doh @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ doh
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = dscores @ kh * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ qh * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(b, s, d)
        dk_ = dkh.transpose(0, 2, 1, 3).reshape(b, s, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(b, s, d)
        d_a_in = _proj_backward(dq, lw.wq, lw, "wq", rec["q_cache"], grads, prefix)
        d_a_in += _proj_backward(dk_, lw.wk, lw, "wk", rec["k_cache"], grads, prefix)
        d_a_in += _proj_backward(dv, lw.wv, lw, "wv", rec["v_cache"], grads, prefix)
        d_x_ln, d_g1, d_b1 = _ln_backward(d_a_in, lw.ln1_g, rec["ln1"])
        grads[prefix + "ln1_g"] = d_g1
        grads[prefix + "ln1_b"] = d_b1
        dx = dx1 + d_x_ln

    d_pos = np.zeros_like(weights.pos_emb)
    np.add.at(d_pos, batch.positions, dx.sum(axis=0))
    grads["pos_emb"] = d_pos
    return grads, dx


def cross_entropy(logits: np.ndarray, batch: TrainBatch) -> tuple[float, np.ndarray, float]:
    """Mean next-token CE over the loss positions.

    Returns (loss, dlogits (b,s,V), accuracy at the loss positions).
    """
    b, s, vocab = logits.shape
    rows = logits[np.arange(b)[:, None], batch.loss_pos]  # (b, q, V)
    z = rows - rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    q = batch.loss_pos.shape[1]
    picked = logp[np.arange(b)[:, None], np.arange(q)[None, :], batch.targets]
    loss = float(-picked.mean())
    acc = float((rows.argmax(axis=-1) == batch.targets).mean())

    drows = np.exp(logp)
    drows[np.arange(b)[:, None], np.arange(q)[None, :], batch.targets] -= 1.0
    drows /= b * q
    dlogits = np.zeros_like(logits)
    dlogits[np.arange(b)[:, None], batch.loss_pos] = drows
    return loss, dlogits, acc


def batch_loss(weights: Weights, batch: TrainBatch) -> float:
    logits, _, _ = forward_train(weights, batch, want_tape=False)
    loss, _, _ = cross_entropy(logits, batch)
    return loss


def batch_loss_and_grads(
    weights: Weights, batch: TrainBatch
) -> tuple[float, dict[str, np.ndarray], np.ndarray, float]:
    """Returns (loss, grads, d_embeds, accuracy)."""
    logits, tape, _ = forward_train(weights, batch, want_tape=True)
    loss, dlogits, acc = cross_entropy(logits, batch)
    grads, d_embeds = backward(weights, batch, tape, dlogits)
    return loss, grads, d_embeds, acc
