"""Toy-scale training loops: teacher pretraining, single-stage
distillation onto a spiking student, and preference optimization.

Everything is deterministic under a fixed seed: data sampling uses one
generator, the loops are single-threaded, and metrics rows are plain
dicts ready for CSV emission.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import (
    cross_entropy_loss,
    dpo_loss,
    kl_distill_loss,
    kto_loss,
    sequence_logprob,
    total_distill_loss,
)
from .mamba2 import SPIKING, LanguageModel, hidden_align_loss
from .optim import AdamW, lr_schedule
from .tensor import ContractError, Graph, Tensor, narrow, pause_recording, reshape
from .tokenizer import BOS, EOS, tokenize

# ---------------------------------------------------------------------------
# synthetic corpus

_SUBJECTS = ["the spike", "the state", "a signal", "the stream", "the gate"]
_VERBS = ["rides", "holds", "opens", "follows", "remembers"]
_OBJECTS = ["the slow river", "a quiet pulse", "the long memory",
            "the next token", "a narrow path"]


def synthetic_corpus(n_lines: int = 400, seed: int = 0) -> list[str]:
    """Short templated sentences over a tiny vocabulary; easy to memorize."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        s = _SUBJECTS[rng.integers(len(_SUBJECTS))]
        v = _VERBS[rng.integers(len(_VERBS))]
        o = _OBJECTS[rng.integers(len(_OBJECTS))]
        lines.append(f"{s} {v} {o}.")
    return lines


def token_stream(lines: list[str]) -> np.ndarray:
    """One long id stream, each line framed by BOS/EOS."""
    if not lines:
        raise ContractError("empty corpus")
    return np.concatenate([tokenize(line) for line in lines])


def sample_windows(stream: np.ndarray, batch: int, width: int,
                   rng: np.random.Generator) -> np.ndarray:
    if stream.size <= width:
        raise ContractError("corpus shorter than one training window")
    starts = rng.integers(0, stream.size - width, size=batch)
    return np.stack([stream[s:s + width] for s in starts])


# ---------------------------------------------------------------------------
# teacher pretraining

def train_teacher(model: LanguageModel, lines: list[str], *, steps: int = 1200,
                  batch: int = 16, seq_len: int = 48, lr: float = 3e-3,
                  seed: int = 0) -> list[dict]:
    stream = token_stream(lines)
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters())
    params = model.parameters()
    rows = []
    for step in range(steps):
        window = sample_windows(stream, batch, seq_len + 1, rng)
        cur_lr = lr_schedule(step, steps, lr)
        with Graph() as g:
            logits, _ = model.forward_batch(window[:, :-1])
            loss = cross_entropy_loss(logits, window[:, 1:])
        grads = g.backward(loss, wrt=params)
        opt.step(grads, cur_lr)
        rows.append({"step": step, "loss": loss.item(), "lr": cur_lr})
    return rows


def eval_ppl(model: LanguageModel, lines: list[str], *, seq_len: int = 48,
             batch: int = 16) -> float:
    """exp(mean next-token cross entropy) over consecutive corpus windows."""
    stream = token_stream(lines)
    width = seq_len + 1
    n_win = stream.size // width
    if n_win == 0:
        raise ContractError("corpus shorter than one evaluation window")
    windows = stream[: n_win * width].reshape(n_win, width)
    total, count = 0.0, 0
    for i in range(0, n_win, batch):
        chunk = windows[i:i + batch]
        logits, _ = model.forward_batch(chunk[:, :-1])
        ce = cross_entropy_loss(logits, chunk[:, 1:]).item()
        total += ce * chunk[:, 1:].size
        count += chunk[:, 1:].size
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# distillation

@dataclass
class DistillBatch:
    """Teacher-forced pseudo-label sequences plus the teacher's logits
    over the continuation region."""

    sequences: np.ndarray       # (B, T) ids: prompt followed by continuation
    prompt_len: int
    teacher_logits: np.ndarray  # (B, T - prompt_len, vocab), continuation-aligned


@dataclass
class DistillResult:
    student: LanguageModel
    metrics: list[dict] = field(default_factory=list)

    @property
    def initial_kl(self) -> float:
        return self.metrics[0]["loss_kl"]

    @property
    def final_kl(self) -> float:
        return self.metrics[-1]["loss_kl"]


def generate_pseudo_labels(teacher: LanguageModel, lines: list[str], *,
                           n_sequences: int = 192, prompt_len: int = 8,
                           total_len: int = 64, seed: int = 0) -> np.ndarray:
    """Greedy teacher continuations of corpus prompts; fixed total length."""
    stream = token_stream(lines)
    rng = np.random.default_rng(seed)
    prompts = sample_windows(stream, n_sequences, prompt_len, rng)
    return teacher.generate_greedy(prompts, max_new=total_len - prompt_len,
                                   kernel="matmul")


def _teacher_logits(teacher: LanguageModel, seqs: np.ndarray,
                    prompt_len: int, batch: int = 32) -> np.ndarray:
    outs = []
    for i in range(0, seqs.shape[0], batch):
        logits, _ = teacher.forward_batch(seqs[i:i + batch])
        outs.append(logits.data[:, prompt_len - 1:-1, :])
    return np.concatenate(outs, axis=0)


def distill_run(teacher: LanguageModel, student: LanguageModel,
                lines: list[str], *, steps: int = 2000, batch: int = 8,
                prompt_len: int = 8, total_len: int = 64,
                n_sequences: int = 192, lr: float = 1e-3, seed: int = 0,
                freeze_spiking_in_hidden: bool = False) -> DistillResult:
    """Single-stage distillation: KL on teacher pseudo-labels plus the
    hidden alignment losses from the compensation path.

    ``freeze_spiking_in_hidden`` detaches the spiking branch inside the
    alignment loss, so that loss only trains the compensation weights
    and pre-neuron activations through the smooth route.
    """
    if student.cfg.mode != SPIKING:
        raise ContractError("the distillation student must be a spiking model")
    if (teacher.cfg.d_model, teacher.cfg.n_layers, teacher.cfg.vocab) != (
            student.cfg.d_model, student.cfg.n_layers, student.cfg.vocab):
        raise ContractError("teacher/student configuration shapes disagree")

    seqs = generate_pseudo_labels(
        teacher, lines, n_sequences=n_sequences, prompt_len=prompt_len,
        total_len=total_len, seed=seed)
    data = DistillBatch(
        sequences=seqs, prompt_len=prompt_len,
        teacher_logits=_teacher_logits(teacher, seqs, prompt_len))

    rng = np.random.default_rng(seed + 1)
    params = student.parameters()
    opt = AdamW(params)
    cont = seqs.shape[1] - prompt_len
    rows = []
    for step in range(steps):
        idx = rng.integers(0, seqs.shape[0], size=batch)
        window = data.sequences[idx]
        cur_lr = lr_schedule(step, steps, lr)
        with Graph() as g:
            logits, auxes = student.forward_batch(window, want_sgc=True)
            s_cont = narrow(logits, 1, prompt_len - 1, cont)
            l_kl = kl_distill_loss(data.teacher_logits[idx], s_cont)
            hidden = []
            for aux in auxes:
                for spk, sgc in aux.sgc_pairs:
                    if freeze_spiking_in_hidden:
                        spk = Tensor(spk.data)
                    hidden.append(hidden_align_loss(spk, sgc))
            loss = total_distill_loss(l_kl, hidden)
        grads = g.backward(loss, wrt=params)
        opt.step(grads, cur_lr)

        stats = student.site_stats(auxes)
        l_hidden = (loss.item() - l_kl.item()) if hidden else 0.0
        rows.append({
            "step": step,
            "loss_total": loss.item(),
            "loss_kl": l_kl.item(),
            "loss_hidden": l_hidden,
            "fr_in": stats.fr_in.rate,
            "fr_out": stats.fr_out.rate,
            "lr": cur_lr,
        })
    return DistillResult(student=student, metrics=rows)


# ---------------------------------------------------------------------------
# preference optimization

@dataclass
class PreferenceExample:
    """One alignment record; paired mode carries both responses."""

    prompt: str
    response: str | None = None
    label: int = 1
    response_w: str | None = None
    response_l: str | None = None
    weight: float = 1.0

    def __post_init__(self):
        paired = self.response_w is not None or self.response_l is not None
        if paired and (self.response_w is None or self.response_l is None):
            raise ContractError("paired examples need both responses")
        if not paired and self.response is None:
            raise ContractError("unpaired examples need a response")
        if self.label not in (1, -1):
            raise ContractError("label must be +1 or -1")
        if self.weight <= 0:
            raise ContractError("weight must be positive")

    @property
    def paired(self) -> bool:
        return self.response_w is not None


def parse_preference_line(line: str, method: str) -> PreferenceExample:
    """Tab-separated records: DPO lines are ``prompt<TAB>preferred<TAB>
    dispreferred``; KTO lines are ``prompt<TAB>response<TAB>{+1,-1}``."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3:
        raise ContractError(f"expected 3 tab-separated fields, got {len(parts)}")
    if method == "dpo":
        return PreferenceExample(prompt=parts[0], response_w=parts[1],
                                 response_l=parts[2])
    if method == "kto":
        if parts[2] not in ("+1", "-1", "1"):
            raise ContractError(f"bad KTO label {parts[2]!r}")
        return PreferenceExample(prompt=parts[0], response=parts[1],
                                 label=1 if parts[2] in ("+1", "1") else -1)
    raise ContractError(f"unknown preference method {method!r}")


def load_preference_file(path, method: str) -> list[PreferenceExample]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(parse_preference_line(line, method))
    if not out:
        raise ContractError(f"{path}: no preference records")
    return out


def synth_preference_lines(lines: list[str], n: int, seed: int,
                           method: str) -> list[str]:
    """Toy preference data: real corpus continuations are preferred over
    random byte noise."""
    rng = np.random.default_rng(seed)
    printable = [chr(c) for c in range(33, 127)]
    out = []
    for _ in range(n):
        line = lines[rng.integers(len(lines))]
        cut = max(3, len(line) // 3)
        prompt, good = line[:cut], line[cut:]
        noise = "".join(printable[rng.integers(len(printable))]
                        for _ in range(len(good)))
        if method == "dpo":
            out.append(f"{prompt}\t{good}\t{noise}")
        else:
            label = "+1" if rng.integers(2) else "-1"
            out.append(f"{prompt}\t{good if label == '+1' else noise}\t{label}")
    return out


def _example_tokens(prompt: str, response: str) -> tuple[np.ndarray, int]:
    ids = np.concatenate([
        np.frombuffer(prompt.encode("utf-8"), dtype=np.uint8).astype(np.int64),
        np.frombuffer(response.encode("utf-8"), dtype=np.uint8).astype(np.int64),
        np.array([EOS], dtype=np.int64),
    ])
    ids = np.concatenate([np.array([BOS], dtype=np.int64), ids])
    start = 1 + len(prompt.encode("utf-8"))
    return ids, start


def _response_logprob(model: LanguageModel, tokens: np.ndarray, start: int) -> Tensor:
    logits, _ = model.forward_batch(tokens[None, :])
    return sequence_logprob(reshape(logits, logits.shape[1:]), tokens, start)


def rl_run(policy: LanguageModel, examples: list[PreferenceExample], *,
           method: str, steps: int = 120, batch: int = 4, lr: float = 5e-6,
           beta_pref: float = 0.1, seed: int = 0) -> list[dict]:
    """DPO / KTO alignment against a frozen copy of the starting policy."""
    if method not in ("dpo", "kto"):
        raise ContractError(f"unknown preference method {method!r}")
    if method == "dpo" and not all(e.paired for e in examples):
        raise ContractError("DPO requires paired examples")
    if method == "kto" and any(e.paired for e in examples):
        examples = [
            PreferenceExample(prompt=e.prompt, response=e.response_w, label=1)
            for e in examples
        ]
    reference = policy.clone()
    rng = np.random.default_rng(seed)
    params = policy.parameters()
    opt = AdamW(params)
    rows = []
    for step in range(steps):
        idx = rng.integers(0, len(examples), size=batch)
        cur_lr = lr_schedule(step, steps, lr)
        with Graph() as g:
            losses = []
            for i in idx:
                ex = examples[i]
                if method == "dpo":
                    tw, sw = _example_tokens(ex.prompt, ex.response_w)
                    tl, sl = _example_tokens(ex.prompt, ex.response_l)
                    with pause_recording():  # the reference policy is frozen
                        ref_w = _response_logprob(reference, tw, sw).item()
                        ref_l = _response_logprob(reference, tl, sl).item()
                    lp_w = _response_logprob(policy, tw, sw)
                    lp_l = _response_logprob(policy, tl, sl)
                    losses.append(dpo_loss((lp_w, lp_l), (ref_w, ref_l), beta_pref))
                else:
                    toks, start = _example_tokens(ex.prompt, ex.response)
                    with pause_recording():
                        ref = _response_logprob(reference, toks, start).item()
                    lp = _response_logprob(policy, toks, start)
                    losses.append(kto_loss([lp], [ref], [ex.label], beta_pref,
                                           weights=[ex.weight]))
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            loss = loss * (1.0 / len(losses))
        grads = g.backward(loss, wrt=params)
        opt.step(grads, cur_lr)
        rows.append({"step": step, "loss": loss.item(), "lr": cur_lr})
    return rows


# ---------------------------------------------------------------------------
# metrics emission

def format_metric(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_metrics_csv(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(fields) + "\n")
        for row in rows:
            f.write(",".join(format_metric(row[k]) for k in fields) + "\n")


DISTILL_FIELDS = ["step", "loss_total", "loss_kl", "loss_hidden",
                  "fr_in", "fr_out", "lr"]
TRAIN_FIELDS = ["step", "loss", "lr"]
