"""Multi-part predictors with coupled recurrent state.

Each part runs a recurrence over the score's frame grid. Three couplings:

  hierarchical: a global recurrence consumes the sum of the current part
    states; heads see the predicting part's state and the global state.
  distributed: each part's recurrence adds a term driven by the sum of
    all parts' previous states; heads see the part's own state.
  independent: no coupling at all; the per-part baseline.

Part sums are accumulated in sorted order so permuting parts cannot
change results even in the last bit. States are rebuilt from zero over a
truncated window before every prediction (part window pk rows, global
window gk <= pk rows). Split and merge flow matrices hit the state stack
when the window crosses their time: merged parts sum, split parts
duplicate.

Heads reuse the single-part factorization with the relative-style shared
pitch classifier: one weight set scores every pitch from the state
features, the decided duration, the recentered lower bits, and the
pitch-class identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .encode import (DurationVocab, FrameGrid, OOVCounter, PitchRange,
                     Resolution, build_frame_grid, location_feature)
from .score import Score

_ARCHS = ("hierarchical", "distributed", "independent")


@dataclass(frozen=True)
class CoupledSpec:
    architecture: str = "hierarchical"
    part_history_k: int = 10
    global_history_k: int = 10
    share_part_weights: bool = True
    hidden: int = 300
    use_location: bool = True
    use_pitch_class: bool = True

    def __post_init__(self):
        if self.architecture not in _ARCHS:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.part_history_k < 1:
            raise ValueError("part history must be >= 1")
        if self.architecture == "hierarchical":
            if not 1 <= self.global_history_k <= self.part_history_k:
                raise ValueError("global history must be in [1, part history]")


_ARCH_TOKENS = {"hier": "hierarchical", "dist": "distributed", "indep": "independent"}


def parse_coupled_spec(text: str) -> CoupledSpec:
    """Parse a spec string like 'hier,pk=10,gk=10'.

    Tokens: hier|dist|indep, pk=INT, gk=INT, h=INT, noloc, nopc, noshare.
    Location and pitch-class features are on by default.
    """
    fields: dict = {}
    for raw_tok in text.split(","):
        tok = raw_tok.strip()
        if not tok:
            continue
        if tok in _ARCH_TOKENS:
            fields["architecture"] = _ARCH_TOKENS[tok]
        elif tok.startswith("pk="):
            fields["part_history_k"] = int(tok[3:])
        elif tok.startswith("gk="):
            fields["global_history_k"] = int(tok[3:])
        elif tok.startswith("h="):
            fields["hidden"] = int(tok[2:])
        elif tok == "noloc":
            fields["use_location"] = False
        elif tok == "nopc":
            fields["use_pitch_class"] = False
        elif tok == "noshare":
            fields["share_part_weights"] = False
        else:
            raise ValueError(f"unknown spec token {tok!r}")
    arch = fields.get("architecture", "hierarchical")
    if "global_history_k" not in fields:
        fields["global_history_k"] = fields.get("part_history_k", 10)
    elif arch != "hierarchical":
        raise ValueError("global history applies only to the hierarchical architecture")
    return CoupledSpec(**fields)


def format_coupled_spec(spec: CoupledSpec) -> str:
    arch = {v: k for k, v in _ARCH_TOKENS.items()}[spec.architecture]
    toks = [arch, f"pk={spec.part_history_k}"]
    if spec.architecture == "hierarchical":
        toks.append(f"gk={spec.global_history_k}")
    if spec.hidden != 300:
        toks.append(f"h={spec.hidden}")
    if not spec.use_location:
        toks.append("noloc")
    if not spec.use_pitch_class:
        toks.append("nopc")
    if not spec.share_part_weights:
        toks.append("noshare")
    return ",".join(toks)


def part_step(h_prev, x, W_p, W_x, b):
    """One part recurrence step: tanh(h @ W_p + x @ W_x + b)."""
    return ad.rnn_cell(h_prev, x, W_p, W_x, b)


def global_step(h_prev, part_states, W_h, W_hp, b):
    """Global recurrence: consumes the order-independent part-state sum."""
    s = ad.ordered_sum(part_states, axis=-2)
    return ad.tanh(ad.add(ad.add(ad.matmul(h_prev, W_h), ad.matmul(s, W_hp)), b))


def distributed_step(h_prev, x, W_p, W_x, W_hp, b):
    """Coupled part recurrence: every part also reads the previous step's
    state sum, so no state depends on a same-step sibling."""
    s = ad.ordered_sum(h_prev, axis=-2)
    coup = ad.matmul(s, W_hp)
    coup = ad.reshape(coup, coup.shape[:-1] + (1,) + coup.shape[-1:])
    base = ad.add(ad.matmul(h_prev, W_p), ad.matmul(x, W_x))
    return ad.tanh(ad.add(ad.add(base, coup), b))


def apply_flow(states, flow: np.ndarray):
    """Route states through a split/merge: new = flow @ states, so merged
    rows sum their sources and split rows copy theirs."""
    states_t = states if isinstance(states, Tensor) else Tensor(states)
    if flow.shape[0] != flow.shape[1] or flow.shape[1] != states_t.shape[-2]:
        raise ad.ShapeMismatch("apply_flow", flow.shape, states_t.shape)
    return ad.matmul(Tensor(flow), states_t)


class CoupledModel:
    """Polyphonic predictor: coupled recurrences plus factored heads."""

    def __init__(self, spec: CoupledSpec, vocab: DurationVocab,
                 pitch_range: PitchRange, resolution: Resolution,
                 max_parts: int = 6, seed: int = 0):
        self.spec = spec
        self.vocab = vocab
        self.pitch_range = pitch_range
        self.resolution = resolution
        self.max_parts = max_parts
        rng = np.random.default_rng(seed)
        N, D, H = pitch_range.n, vocab.size, spec.hidden
        F = N + D
        self.params: dict[str, Param] = {}

        def param(name, shape, zero=False):
            p = Param(np.zeros(shape) if zero else ad.uniform_init(rng, shape),
                      name=name)
            self.params[name] = p
            return p

        n_sets = 1 if spec.share_part_weights else max_parts
        for i in range(n_sets):
            tag = "part" if spec.share_part_weights else f"part{i}"
            param(f"{tag}.Wp", (H, H))
            param(f"{tag}.Wx", (F, H))
            param(f"{tag}.b", (H,), zero=True)
        if spec.architecture == "hierarchical":
            param("glob.Wh", (H, H))
            param("glob.Whp", (H, H))
            param("glob.b", (H,), zero=True)
        elif spec.architecture == "distributed":
            param("coup.Whp", (H, H))

        param("t_head.W", (H, D - 1))
        if spec.architecture == "hierarchical":
            param("t_head.Wg", (H, D - 1))
        if spec.use_location:
            param("t_head.Wloc", (resolution.frames_per_beat, D - 1))
        param("t_head.b", (D - 1,), zero=True)

        param("n_head.W", (H, 1))
        if spec.architecture == "hierarchical":
            param("n_head.Wg", (H, 1))
        param("n_head.Wyt", (D - 1, 1))
        param("n_head.Wbelow", (2 * N - 1, 1))
        if spec.use_pitch_class:
            param("n_head.Wpc", (N, 1))
        param("n_head.b", (1,), zero=True)

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # ----- state computation -----

    def _part_weights(self, p: int):
        tag = "part" if self.spec.share_part_weights else f"part{p}"
        return (self.params[f"{tag}.Wp"], self.params[f"{tag}.Wx"],
                self.params[f"{tag}.b"])

    def _step_all_parts(self, h, x):
        """h, x: (..., P, H), (..., P, F) -> (..., P, H) for one grid row."""
        if self.spec.architecture == "distributed":
            if not self.spec.share_part_weights:
                raise NotImplementedError("distributed coupling requires shared weights")
            Wp, Wx, b = self._part_weights(0)
            return distributed_step(h, x, Wp, Wx, self.params["coup.Whp"], b)
        if self.spec.share_part_weights:
            Wp, Wx, b = self._part_weights(0)
            return part_step(h, x, Wp, Wx, b)
        P = h.shape[-2]
        cols = []
        for p in range(P):
            Wp, Wx, b = self._part_weights(p)
            cols.append(part_step(h[..., p, :], x[..., p, :], Wp, Wx, b))
        return ad.stack(cols, axis=-2)

    def run_states(self, windows: np.ndarray,
                   flow_schedule: list[tuple[int, np.ndarray]] | None = None):
        """Rebuild states over a (B, pk, P, F) window stack.

        Returns (part_states (B, P, H), global_state (B, H) or None).
        flow_schedule lists (step_index, matrix) pairs: the matrix hits the
        states before the row at that step is consumed; pk is a valid index
        for flows that land exactly on the prediction time.
        """
        B, pk, P, _ = windows.shape
        H = self.spec.hidden
        gk = self.spec.global_history_k
        h = Tensor(np.zeros((B, P, H)))
        h_g = Tensor(np.zeros((B, H))) if self.spec.architecture == "hierarchical" else None
        flows = {j: m for j, m in (flow_schedule or [])}
        for j in range(pk):
            if j in flows:
                h = apply_flow(h, flows[j])
            h = self._step_all_parts(h, Tensor(windows[:, j]))
            if h_g is not None and j >= pk - gk:
                h_g = global_step(h_g, h, self.params["glob.Wh"],
                                  self.params["glob.Whp"], self.params["glob.b"])
        if pk in flows:
            h = apply_flow(h, flows[pk])
        return h, h_g

    # ----- heads -----

    def _head_logits(self, part_feat, glob_feat, loc, y_t, y_bits):
        """part_feat (B, H), glob_feat (B, H) | None -> (dur (B, D-1),
        pitch (B, N)) teacher-forced logit tensors."""
        B = part_feat.shape[0]
        N, D = self.pitch_range.n, self.vocab.size
        dur = ad.add(Tensor(np.zeros((B, D - 1))), self.params["t_head.b"])
        dur = ad.add(dur, ad.matmul(part_feat, self.params["t_head.W"]))
        if glob_feat is not None:
            dur = ad.add(dur, ad.matmul(glob_feat, self.params["t_head.Wg"]))
        if self.spec.use_location:
            if loc is None:
                raise ValueError("model expects a location feature")
            dur = ad.add(dur, ad.matmul(Tensor(loc), self.params["t_head.Wloc"]))

        yt_onehot = np.zeros((B, D - 1))
        yt_onehot[np.arange(B), y_t] = 1.0
        mask = np.tril(np.ones((N, N)), k=-1)
        below = y_bits[:, None, :] * mask[None]          # (B, N, N)
        below_rel = np.zeros((B, N, 2 * N - 1))
        for c in range(N):
            below_rel[:, c, (N - 1) - c:(2 * N - 1) - c] = below[:, c]

        pitch = ad.add(Tensor(np.zeros((B, N))), self.params["n_head.b"])
        pitch = ad.add(pitch, ad.matmul(part_feat, self.params["n_head.W"]))
        if glob_feat is not None:
            pitch = ad.add(pitch, ad.matmul(glob_feat, self.params["n_head.Wg"]))
        pitch = ad.add(pitch, ad.matmul(Tensor(yt_onehot), self.params["n_head.Wyt"]))
        pitch = ad.add(pitch, ad.matmul(Tensor(below_rel),
                                        self.params["n_head.Wbelow"]).reshape(B, N))
        if self.spec.use_pitch_class:
            pitch = ad.add(pitch, self.params["n_head.Wpc"].reshape(N))
        return dur, pitch

    # ----- encoding -----

    def encode_score(self, score: Score, oov: OOVCounter | None = None) -> dict:
        """Grid plus per-event prediction arrays for a whole score."""
        grid = build_frame_grid(score, self.vocab, self.pitch_range, oov)
        ends, parts, yt, ybits, locs, onsets = [], [], [], [], [], []
        for t0, p, i, ev in score.events_in_order():
            ends.append(grid.rows_before(t0))
            parts.append(p)
            yt.append(self.vocab.real_index(ev.duration, oov))
            ybits.append(self.pitch_range.multi_hot(ev.pitches, oov))
            locs.append(location_feature(t0, self.resolution))
            onsets.append(t0)
        return {
            "grid": grid,
            "row_end": np.array(ends, dtype=int),
            "part": np.array(parts, dtype=int),
            "y_t": np.array(yt, dtype=int),
            "y_bits": np.stack(ybits),
            "loc": np.stack(locs),
            "onsets": onsets,
            "beats": float(score.total_beats),
            "flows": score.flows,
        }

    def _windows(self, grid: FrameGrid, row_end: np.ndarray) -> np.ndarray:
        """Gather (B, pk, P, F) history windows ending before each event."""
        pk = self.spec.part_history_k
        idx = row_end[:, None] - pk + np.arange(pk)[None, :]
        valid = idx >= 0
        rows = grid.data[idx.clip(min=0)]               # (B, pk, P, F)
        return rows * valid[:, :, None, None]

    def _has_flows(self, arrays: dict) -> bool:
        return any(not np.array_equal(m, np.eye(m.shape[0])) for _, m in arrays["flows"])

    def unit_loss(self, arrays: dict):
        """Summed (bits_t, bits_n) graph nodes over one encoded score."""
        if self._has_flows(arrays):
            return self._unit_loss_flows(arrays)
        windows = self._windows(arrays["grid"], arrays["row_end"])
        h, h_g = self.run_states(windows)
        B = windows.shape[0]
        part_feat = h[np.arange(B), arrays["part"]]
        loc = arrays["loc"] if self.spec.use_location else None
        dur, pitch = self._head_logits(part_feat, h_g, loc,
                                       arrays["y_t"], arrays["y_bits"])
        bits_t = ad.softmax_ce(dur, arrays["y_t"])
        bits_n = ad.sigmoid_bce(pitch, arrays["y_bits"])
        return bits_t, bits_n

    def _flow_schedule(self, grid: FrameGrid, end: int,
                       flows, t0: Fraction) -> list[tuple[int, np.ndarray]]:
        """Map flow times onto window step indices for one prediction.

        Step j consumes grid row end - pk + j. A flow at time tf applies
        before the first consumed row whose start time >= tf; flows landing
        after the last row but at or before the prediction time map to
        step pk.
        """
        pk = self.spec.part_history_k
        schedule = []
        for tf, m in flows:
            if np.array_equal(m, np.eye(m.shape[0])):
                continue
            if tf > t0:
                continue
            j = None
            for step in range(pk):
                r = end - pk + step
                if r < 0:
                    continue
                if grid.times[r] >= tf:
                    j = step
                    break
            if j is None:
                j = pk
            schedule.append((j, m))
        return schedule

    def _unit_loss_flows(self, arrays: dict):
        grid: FrameGrid = arrays["grid"]
        pk = self.spec.part_history_k
        bits_t_parts, bits_n_parts = [], []
        B = len(arrays["row_end"])
        for e in range(B):
            end = int(arrays["row_end"][e])
            idx = np.arange(end - pk, end)
            valid = idx >= 0
            window = grid.data[idx.clip(min=0)] * valid[:, None, None]
            sched = self._flow_schedule(grid, end, arrays["flows"],
                                        arrays["onsets"][e])
            h, h_g = self.run_states(window[None], sched)
            part_feat = h[np.arange(1), arrays["part"][e:e + 1]]
            loc = arrays["loc"][e:e + 1] if self.spec.use_location else None
            dur, pitch = self._head_logits(part_feat, h_g, loc,
                                           arrays["y_t"][e:e + 1],
                                           arrays["y_bits"][e:e + 1])
            bits_t_parts.append(ad.softmax_ce(dur, arrays["y_t"][e:e + 1]))
            bits_n_parts.append(ad.sigmoid_bce(pitch, arrays["y_bits"][e:e + 1]))
        bt = bits_t_parts[0]
        bn = bits_n_parts[0]
        for t in bits_t_parts[1:]:
            bt = ad.add(bt, t)
        for t in bits_n_parts[1:]:
            bn = ad.add(bn, t)
        return bt, bn

    # ----- evaluation -----

    def score_nll(self, score: Score,
                  oov: OOVCounter | None = None) -> tuple[float, float, float, int]:
        """(bits_t, bits_n, beats, n_events) for a whole score."""
        arrays = self.encode_score(score, oov=oov)
        bits_t, bits_n = self.unit_loss(arrays)
        return (float(bits_t.value), float(bits_n.value), arrays["beats"],
                len(arrays["y_t"]))

    def polyphonic_event_nll(self, score: Score, part: int, event_index: int,
                             oov: OOVCounter | None = None) -> tuple[float, float]:
        """(bits_t, bits_n) of one event under teacher forcing."""
        arrays = self.encode_score(score, oov=oov)
        onsets = score.parts[part].onsets()
        t0 = onsets[event_index]
        for e in range(len(arrays["y_t"])):
            if arrays["part"][e] == part and arrays["onsets"][e] == t0:
                sub = {
                    "grid": arrays["grid"],
                    "row_end": arrays["row_end"][e:e + 1],
                    "part": arrays["part"][e:e + 1],
                    "y_t": arrays["y_t"][e:e + 1],
                    "y_bits": arrays["y_bits"][e:e + 1],
                    "loc": arrays["loc"][e:e + 1],
                    "onsets": arrays["onsets"][e:e + 1],
                    "beats": arrays["beats"],
                    "flows": arrays["flows"],
                }
                bits_t, bits_n = self.unit_loss(sub)
                return float(bits_t.value), float(bits_n.value)
        raise ValueError(f"event {event_index} of part {part} not found")

    # ----- sampling support -----

    def predict_heads(self, windows: np.ndarray, loc: np.ndarray | None,
                      part: int):
        """Numpy head inputs for one prediction: windows (pk, P, F).

        Returns (duration logits (D-1,), cache) where cache feeds
        pitch_logit for the sequential bit sweep.
        """
        h, h_g = self.run_states(windows[None])
        part_feat = h.value[0, part]
        glob = None if h_g is None else h_g.value[0]
        D = self.vocab.size
        dur = self.params["t_head.b"].value.copy()
        dur += part_feat @ self.params["t_head.W"].value
        if glob is not None:
            dur += glob @ self.params["t_head.Wg"].value
        if self.spec.use_location:
            if loc is None:
                raise ValueError("model expects a location feature")
            dur += loc @ self.params["t_head.Wloc"].value
        return dur, (part_feat, glob)

    def pitch_logit(self, cache, y_t: int, below_bits: np.ndarray, center_slot: int) -> float:
        part_feat, glob = cache
        N, D = self.pitch_range.n, self.vocab.size
        logit = float(self.params["n_head.b"].value[0])
        logit += float(part_feat @ self.params["n_head.W"].value[:, 0])
        if glob is not None:
            logit += float(glob @ self.params["n_head.Wg"].value[:, 0])
        yt_onehot = np.zeros(D - 1)
        yt_onehot[y_t] = 1.0
        logit += float(yt_onehot @ self.params["n_head.Wyt"].value[:, 0])
        below = below_bits.copy()
        below[center_slot:] = 0.0
        below_rel = np.zeros(2 * N - 1)
        below_rel[(N - 1) - center_slot:(2 * N - 1) - center_slot] = below
        logit += float(below_rel @ self.params["n_head.Wbelow"].value[:, 0])
        if self.spec.use_pitch_class:
            logit += float(self.params["n_head.Wpc"].value[center_slot, 0])
        return logit
