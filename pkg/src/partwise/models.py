"""Single-part predictors: the factored duration-then-pitch model zoo.

Every model predicts one event in two stages. A softmax over the real
duration classes comes first (the continuation slot is a history marker,
never a prediction target). Pitches follow as a chain of Bernoulli bits
ordered low to high, each conditioned on the sampled duration and the
bits already decided below it.

Bodies turn the history into a feature vector (bias ignores it, lin
flattens it, fc/conv/rnn transform it); conditioning extras (beat
location for the duration head; decided duration, lower pitch bits, and
the pitch-class identity for the pitch head) enter as separate linear
blocks summed into the final logit, which is the same as concatenating
them before one linear head.

Pitch heads come in two flavors: absolute mode learns separate head
weights per pitch slot; relative mode recenters the history pitch axis
on the queried pitch (widened to 2N-1 slots) and shares one head across
all pitches, optionally breaking the translation symmetry with the
pitch-class feature.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .encode import (DurationVocab, FrameGrid, OOVCounter, PitchEmbedding,
                     PitchRange, Resolution, build_frame_grid, encode_history,
                     encode_part_events)
from .score import Score


class SpecMismatch(Exception):
    """Features offered to a model disagree with its spec."""


_BODIES = ("bias", "lin", "fc", "conv", "rnn")


@dataclass(frozen=True)
class ModelSpec:
    """One row of the single-part model zoo.

    conv_widths lists stacked convolution widths in application order
    (input first). interspersed selects the full-score frame-grid history
    with continuation rows in place of the plain event history.
    """

    body: str = "lin"
    conv_widths: tuple[int, ...] = ()
    history_k: int = 1
    pitch_mode: str = "absolute"
    use_location: bool = False
    use_pitch_class: bool = False
    duration_embed: str = "raw"      # raw | octave
    pitch_embed: str = "raw"         # raw | learned16
    hidden: int = 300
    interspersed: bool = False

    def __post_init__(self):
        if self.body not in _BODIES:
            raise ValueError(f"unknown body {self.body!r}")
        if self.body == "conv" and not self.conv_widths:
            raise ValueError("conv body needs widths")
        if self.pitch_mode not in ("absolute", "relative"):
            raise ValueError(f"unknown pitch mode {self.pitch_mode!r}")
        if self.use_pitch_class and self.pitch_mode != "relative":
            raise ValueError("pitch-class feature requires relative mode")
        if self.duration_embed not in ("raw", "octave"):
            raise ValueError(f"unknown duration embed {self.duration_embed!r}")
        if self.pitch_embed not in ("raw", "learned16"):
            raise ValueError(f"unknown pitch embed {self.pitch_embed!r}")
        if self.history_k < 1:
            raise ValueError("history_k must be >= 1")


def parse_model_spec(text: str) -> ModelSpec:
    """Parse a spec string like 'rnn,k=10,rel,loc,pc,emb=learned16'.

    Tokens: body (bias|lin|fc|convW[_W2...]|rnn), k=INT, rel|abs, loc, pc,
    emb=learned16|raw, demb=octave|raw, h=INT, grid. 'loglinear' is an
    alias for lin. Stacked conv widths apply input-first: conv5_3 runs the
    width-5 layer, then width-3 on its output.
    """
    fields: dict = {}
    for raw_tok in text.split(","):
        tok = raw_tok.strip()
        if not tok:
            continue
        m = re.fullmatch(r"conv(\d+(?:_\d+)*)", tok)
        if m:
            fields["body"] = "conv"
            fields["conv_widths"] = tuple(int(w) for w in m.group(1).split("_"))
        elif tok in ("bias", "lin", "fc", "rnn"):
            fields["body"] = tok
        elif tok == "loglinear":
            fields["body"] = "lin"
        elif tok.startswith("k="):
            fields["history_k"] = int(tok[2:])
        elif tok == "rel":
            fields["pitch_mode"] = "relative"
        elif tok == "abs":
            fields["pitch_mode"] = "absolute"
        elif tok == "loc":
            fields["use_location"] = True
        elif tok == "pc":
            fields["use_pitch_class"] = True
        elif tok.startswith("emb="):
            fields["pitch_embed"] = tok[4:]
        elif tok.startswith("demb="):
            fields["duration_embed"] = tok[5:]
        elif tok.startswith("h="):
            fields["hidden"] = int(tok[2:])
        elif tok == "grid":
            fields["interspersed"] = True
        else:
            raise ValueError(f"unknown spec token {tok!r}")
    return ModelSpec(**fields)


def format_model_spec(spec: ModelSpec) -> str:
    toks = [spec.body if spec.body != "conv"
            else "conv" + "_".join(str(w) for w in spec.conv_widths)]
    toks.append(f"k={spec.history_k}")
    if spec.pitch_mode == "relative":
        toks.append("rel")
    if spec.use_location:
        toks.append("loc")
    if spec.use_pitch_class:
        toks.append("pc")
    if spec.pitch_embed != "raw":
        toks.append(f"emb={spec.pitch_embed}")
    if spec.duration_embed != "raw":
        toks.append(f"demb={spec.duration_embed}")
    if spec.hidden != 300:
        toks.append(f"h={spec.hidden}")
    if spec.interspersed:
        toks.append("grid")
    return ",".join(toks)


class Body:
    """Feature extractor from a (B, k, F) history to (B, out_dim)."""

    def __init__(self, kind: str, widths: tuple[int, ...], in_dim: int, k: int,
                 hidden: int, rng: np.random.Generator, prefix: str):
        self.kind, self.k, self.in_dim = kind, k, in_dim
        self.params: dict[str, Param] = {}
        if kind in ("bias",):
            self.out_dim = 0
        elif kind == "lin":
            self.out_dim = k * in_dim
        elif kind == "fc":
            self._add(prefix + ".W", rng, (k * in_dim, hidden))
            self._add(prefix + ".b", rng, (hidden,), zero=True)
            self.out_dim = hidden
        elif kind == "conv":
            cur = in_dim
            for i, w in enumerate(widths):
                self._add(f"{prefix}.conv{i}.K", rng, (w, cur, hidden), fan_in=w * cur)
                cur = hidden
            self.out_dim = hidden
        elif kind == "rnn":
            self._add(prefix + ".Wh", rng, (hidden, hidden))
            self._add(prefix + ".Wx", rng, (in_dim, hidden))
            self._add(prefix + ".b", rng, (hidden,), zero=True)
            self.out_dim = hidden
        else:
            raise ValueError(kind)
        self.widths = widths
        self.hidden = hidden

    def _add(self, name: str, rng, shape: tuple, fan_in: int | None = None,
             zero: bool = False):
        value = np.zeros(shape) if zero else ad.uniform_init(rng, shape, fan_in)
        self.params[name] = Param(value, name=name)

    def forward(self, x: Tensor) -> Tensor | None:
        """x: (B, k, F) -> (B, out_dim); None for the bias body."""
        if self.kind == "bias":
            return None
        B = x.shape[0]
        if self.kind == "lin":
            return x.reshape(B, self.k * self.in_dim)
        if self.kind == "fc":
            flat = x.reshape(B, self.k * self.in_dim)
            return ad.fc(flat, self.params_by_suffix("W"), self.params_by_suffix("b"))
        if self.kind == "conv":
            h = x
            for i in range(len(self.widths)):
                kern = next(p for n, p in self.params.items() if f".conv{i}." in n)
                h = ad.tanh(ad.conv1d(h, kern))
            return h[:, -1, :]
        if self.kind == "rnn":
            Wh = self.params_by_suffix("Wh")
            Wx = self.params_by_suffix("Wx")
            b = self.params_by_suffix("b")
            h = Tensor(np.zeros((B, self.hidden)))
            for t in range(self.k):
                h = ad.rnn_cell(h, x[:, t, :], Wh, Wx, b)
            return h
        raise AssertionError(self.kind)

    def params_by_suffix(self, suffix: str) -> Param:
        return next(p for n, p in self.params.items() if n.endswith("." + suffix))


class HomophonicModel:
    """Duration-then-pitch predictor over a single part's history."""

    def __init__(self, spec: ModelSpec, vocab: DurationVocab,
                 pitch_range: PitchRange, resolution: Resolution,
                 seed: int = 0):
        self.spec = spec
        self.vocab = vocab
        self.pitch_range = pitch_range
        self.resolution = resolution
        rng = np.random.default_rng(seed)
        N, D = pitch_range.n, vocab.size
        self.params: dict[str, Param] = {}

        # duration head sees the absolute-pitch history, optionally with
        # the fixed octave-quotient embedding
        self._dur_fixed = (PitchEmbedding.fixed_octave(pitch_range)
                           if spec.duration_embed == "octave" else None)
        t_in = (12 if self._dur_fixed else N) + D
        self.body_t = Body(spec.body, spec.conv_widths, t_in, spec.history_k,
                           spec.hidden, rng, "t_body")
        self.params.update(self.body_t.params)

        # pitch head: learned embedding is a trainable matrix over the
        # (possibly widened) pitch axis
        axis = 2 * N - 1 if spec.pitch_mode == "relative" else N
        if spec.pitch_embed == "learned16":
            self._emb = self._param(rng, "n_emb.W", (axis, 16))
            n_in = 16 + D
        else:
            self._emb = None
            n_in = axis + D
        self.body_n = Body(spec.body, spec.conv_widths, n_in, spec.history_k,
                           spec.hidden, rng, "n_body")
        self.params.update(self.body_n.params)

        # heads as separate summed blocks
        if self.body_t.out_dim:
            self._param(rng, "t_head.W", (self.body_t.out_dim, D - 1))
        if spec.use_location:
            self._param(rng, "t_head.Wloc", (resolution.frames_per_beat, D - 1))
        self._param(rng, "t_head.b", (D - 1,), zero=True)

        if spec.body != "bias":
            if spec.pitch_mode == "absolute":
                if self.body_n.out_dim:
                    self._param(rng, "n_head.W", (self.body_n.out_dim, N))
                self._param(rng, "n_head.Wyt", (D - 1, N))
                self._param(rng, "n_head.Wbelow", (N, N))
            else:
                if self.body_n.out_dim:
                    self._param(rng, "n_head.W", (self.body_n.out_dim, 1))
                self._param(rng, "n_head.Wyt", (D - 1, 1))
                self._param(rng, "n_head.Wbelow", (2 * N - 1, 1))
                if spec.use_pitch_class:
                    self._param(rng, "n_head.Wpc", (N, 1))
        self._param(rng, "n_head.b",
                    (N,) if spec.pitch_mode == "absolute" or spec.body == "bias" else (1,),
                    zero=True)

    def _param(self, rng, name: str, shape: tuple, zero: bool = False) -> Param:
        p = Param(np.zeros(shape) if zero else ad.uniform_init(rng, shape), name=name)
        self.params[name] = p
        return p

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # ----- encoding -----

    def encode_event(self, score: Score, part: int, event_index: int,
                     grid: FrameGrid | None = None, oov: OOVCounter | None = None):
        """History matrix (k, N+D), location one-hot, targets for one event."""
        if self.spec.interspersed:
            hist, loc, targets = encode_history(
                score, part, event_index, self.spec.history_k, self.vocab,
                self.pitch_range, self.resolution, grid=grid, oov=oov)
            return hist[:, part, :], loc, targets
        hist, loc, targets = encode_part_events(
            score, part, event_index, self.spec.history_k, self.vocab,
            self.pitch_range, self.resolution, oov=oov)
        return hist, loc, targets

    def encode_unit(self, score: Score, part: int, oov: OOVCounter | None = None) -> dict:
        """Stack every event of one part into batched arrays."""
        grid = (build_frame_grid(score, self.vocab, self.pitch_range, oov)
                if self.spec.interspersed else None)
        hists, locs, yt, ybits = [], [], [], []
        n_events = len(score.parts[part].events)
        for i in range(n_events):
            h, loc, tg = self.encode_event(score, part, i, grid=grid, oov=oov)
            hists.append(h)
            locs.append(loc)
            yt.append(tg.duration_real_index)
            ybits.append(tg.pitch_bits)
        return {
            "hist": np.stack(hists),          # (B, k, N+D)
            "loc": np.stack(locs),            # (B, fpb)
            "y_t": np.array(yt, dtype=int),   # (B,)
            "y_bits": np.stack(ybits),        # (B, N)
            "beats": float(score.parts[part].total_beats),
        }

    # ----- batched forward passes -----

    def _dur_input(self, hist: np.ndarray) -> np.ndarray:
        if self._dur_fixed is None:
            return hist
        n = self.pitch_range.n
        return np.concatenate([hist[..., :n] @ self._dur_fixed.weights,
                               hist[..., n:]], axis=-1)

    def duration_logits(self, hist: np.ndarray, loc: np.ndarray | None) -> Tensor:
        """hist (B, k, N+D), loc (B, fpb) -> logits (B, D-1)."""
        if (loc is not None) != self.spec.use_location:
            raise SpecMismatch("location feature presence disagrees with spec")
        B = hist.shape[0]
        logits = ad.add(Tensor(np.zeros((B, self.vocab.size - 1))),
                        self.params["t_head.b"])
        if self.spec.body != "bias":
            feat = self.body_t.forward(Tensor(self._dur_input(hist)))
            logits = ad.add(logits, ad.matmul(feat, self.params["t_head.W"]))
        if self.spec.use_location:
            logits = ad.add(logits, ad.matmul(Tensor(loc), self.params["t_head.Wloc"]))
        return logits

    def _relative_histories(self, hist: np.ndarray) -> np.ndarray:
        """(B, k, N+D) -> (B, N, k, 2N-1+D): one recentered copy per pitch."""
        B, k, _ = hist.shape
        N, D = self.pitch_range.n, self.vocab.size
        out = np.zeros((B, N, k, 2 * N - 1 + D))
        for c in range(N):
            start = (N - 1) - c
            out[:, c, :, start:start + N] = hist[:, :, :N]
        out[:, :, :, 2 * N - 1:] = hist[None, :, :, N:].swapaxes(0, 1)
        return out

    @staticmethod
    def _below_matrix(y_bits: np.ndarray) -> np.ndarray:
        """(B, N) ground-truth bits -> (B, N, N) teacher-forced lower bits:
        row n holds the bits at positions strictly below n."""
        N = y_bits.shape[-1]
        mask = np.tril(np.ones((N, N)), k=-1)
        return y_bits[:, None, :] * mask[None]

    def _recenter_below(self, below: np.ndarray) -> np.ndarray:
        """(B, N, N) -> (B, N, 2N-1): shift row n's bits so slot n lands
        at the center, matching the relative history view."""
        B, N, _ = below.shape
        out = np.zeros((B, N, 2 * N - 1))
        for c in range(N):
            start = (N - 1) - c
            out[:, c, start:start + N] = below[:, c, :]
        return out

    def pitch_logits(self, hist: np.ndarray, y_t: np.ndarray,
                     y_bits: np.ndarray) -> Tensor:
        """Teacher-forced logits for every pitch slot: (B, N)."""
        B = hist.shape[0]
        N, D = self.pitch_range.n, self.vocab.size
        logits = ad.add(Tensor(np.zeros((B, N))), self.params["n_head.b"])
        if self.spec.body == "bias":
            return logits
        yt_onehot = np.zeros((B, D - 1))
        yt_onehot[np.arange(B), y_t] = 1.0
        below = self._below_matrix(y_bits)
        if self.spec.pitch_mode == "absolute":
            feat = self._pitch_body_feat(hist)
            if feat is not None:
                logits = ad.add(logits, ad.matmul(feat, self.params["n_head.W"]))
            logits = ad.add(logits, ad.matmul(Tensor(yt_onehot), self.params["n_head.Wyt"]))
            below_term = ad.reduce_sum(
                ad.mul(self.params["n_head.Wbelow"], Tensor(below)), axis=2)
            logits = ad.add(logits, below_term)
            return logits
        # relative: shared head over per-center features
        feat = self._pitch_body_feat(hist)           # (B, N, F)
        if feat is not None:
            logits = ad.add(logits, ad.matmul(feat, self.params["n_head.W"])
                            .reshape(B, N))
        yt_term = ad.matmul(Tensor(yt_onehot), self.params["n_head.Wyt"])  # (B, 1)
        logits = ad.add(logits, yt_term)
        below_rel = self._recenter_below(below)       # (B, N, 2N-1)
        logits = ad.add(logits, ad.matmul(Tensor(below_rel), self.params["n_head.Wbelow"])
                        .reshape(B, N))
        if self.spec.use_pitch_class:
            logits = ad.add(logits, self.params["n_head.Wpc"].reshape(N))
        return logits

    def _pitch_body_feat(self, hist: np.ndarray) -> Tensor | None:
        """Body features for the pitch head: (B, F) absolute, (B, N, F)
        relative (one pass per recentered copy)."""
        if self.body_n.out_dim == 0:
            return None
        N, D = self.pitch_range.n, self.vocab.size
        if self.spec.pitch_mode == "absolute":
            x = Tensor(hist)
            x = self._apply_emb(x, N)
            return self.body_n.forward(x)
        rel = self._relative_histories(hist)          # (B, N, k, 2N-1+D)
        B, _, k, F = rel.shape
        x = Tensor(rel.reshape(B * N, k, F))
        x = self._apply_emb(x, 2 * N - 1)
        feat = self.body_n.forward(x)                 # (B*N, F_out)
        return feat.reshape(B, N, self.body_n.out_dim)

    def _apply_emb(self, x: Tensor, axis: int) -> Tensor:
        if self._emb is None:
            return x
        pitch = ad.matmul(x[..., :axis], self._emb)
        return ad.concat([pitch, x[..., axis:]], axis=-1)

    # ----- losses -----

    def unit_loss(self, arrays: dict) -> tuple[Tensor, Tensor]:
        """Summed (bits_t, bits_n) graph nodes over one encoded part."""
        loc = arrays["loc"] if self.spec.use_location else None
        dur_logits = self.duration_logits(arrays["hist"], loc)
        bits_t = ad.softmax_ce(dur_logits, arrays["y_t"])
        pitch_logits = self.pitch_logits(arrays["hist"], arrays["y_t"], arrays["y_bits"])
        bits_n = ad.sigmoid_bce(pitch_logits, arrays["y_bits"])
        return bits_t, bits_n

    def sequence_nll(self, score: Score, part: int,
                     oov: OOVCounter | None = None) -> tuple[float, float, float, int]:
        """(bits_t, bits_n, beats, n_events) for one part, no gradients."""
        arrays = self.encode_unit(score, part, oov=oov)
        bits_t, bits_n = self.unit_loss(arrays)
        return (float(bits_t.value), float(bits_n.value), arrays["beats"],
                len(arrays["y_t"]))

    def event_nll(self, score: Score, part: int, event_index: int,
                  oov: OOVCounter | None = None) -> tuple[float, float]:
        """(bits_t, bits_n) of a single event under teacher forcing."""
        h, loc, tg = self.encode_event(score, part, event_index, oov=oov)
        arrays = {
            "hist": h[None], "loc": loc[None],
            "y_t": np.array([tg.duration_real_index]),
            "y_bits": tg.pitch_bits[None],
        }
        bits_t, bits_n = self.unit_loss(arrays)
        return float(bits_t.value), float(bits_n.value)

    # ----- single-event prediction (sampling path) -----

    def predict_duration(self, hist: np.ndarray, loc: np.ndarray | None = None) -> np.ndarray:
        """Logits over the D-1 real durations for one history (k, N+D)."""
        return self.duration_logits(hist[None], None if loc is None else loc[None]).value[0]

    def pitch_feature_cache(self, hist: np.ndarray):
        """Precompute body features reused across a pitch sweep."""
        feat = self._pitch_body_feat(hist[None])
        return None if feat is None else feat.value[0]

    def predict_pitch_bit(self, hist: np.ndarray, y_t: int, y_below: np.ndarray,
                          n: int, feat_cache=None) -> float:
        """Bernoulli logit for pitch n given decided lower bits (length N,
        positions >= slot(n) ignored)."""
        N, D = self.pitch_range.n, self.vocab.size
        c = self.pitch_range.index(n)
        b = self.params["n_head.b"].value
        if self.spec.body == "bias":
            return float(b[c])
        if feat_cache is None:
            feat_cache = self.pitch_feature_cache(hist)
        below = y_below.copy()
        below[c:] = 0.0
        yt_onehot = np.zeros(D - 1)
        yt_onehot[y_t] = 1.0
        if self.spec.pitch_mode == "absolute":
            logit = float(b[c])
            if feat_cache is not None:
                logit += float(feat_cache @ self.params["n_head.W"].value[:, c])
            logit += float(yt_onehot @ self.params["n_head.Wyt"].value[:, c])
            logit += float(below @ self.params["n_head.Wbelow"].value[c])
            return logit
        logit = float(b[0])
        if feat_cache is not None:
            logit += float(feat_cache[c] @ self.params["n_head.W"].value[:, 0])
        logit += float(yt_onehot @ self.params["n_head.Wyt"].value[:, 0])
        start = (N - 1) - c
        below_rel = np.zeros(2 * N - 1)
        below_rel[start:start + N] = below
        logit += float(below_rel @ self.params["n_head.Wbelow"].value[:, 0])
        if self.spec.use_pitch_class:
            logit += float(self.params["n_head.Wpc"].value[c, 0])
        return logit
