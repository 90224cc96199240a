"""Command-line entry points.

Every command resolves its parameters from built-in defaults, then an
optional ``key=value`` parameter file (``--params``), then explicit
flags; the resolved set is written next to the outputs so runs are
reproducible. Exit codes: 0 success, 1 input validation failure,
2 contract or oracle failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import checkpoint, energy
from .gradcheck import REL_TOL, check_gradients
from .losses import (
    cross_entropy_loss,
    dpo_loss,
    kl_distill_loss,
    kto_loss,
)
from .mamba2 import (
    DENSE,
    SPIKING,
    LanguageModel,
    Mamba2Config,
    block_forward,
    hidden_align_loss,
    init_block_params,
    make_clamp_hook,
    sgc_forward,
    toy_config,
)
from .neurons import (
    ILIF,
    LIF,
    TILIF,
    NeuronConfig,
    collapse_spike_train,
    expand_spike_train,
    quantize,
)
from .spike_kernel import spike_linear_event, spike_linear_int
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    activation,
    dtype_scope,
    parameter,
    rmsnorm,
    set_default_dtype,
    softmax,
    sum_,
)
from .training import (
    DISTILL_FIELDS,
    TRAIN_FIELDS,
    distill_run,
    eval_ppl,
    load_preference_file,
    rl_run,
    synth_preference_lines,
    synthetic_corpus,
    token_stream,
    train_teacher,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONTRACT = 2


class CliError(Exception):
    """Input validation failure (exit code 1)."""


@dataclass
class Opt:
    type: Callable
    default: Any = None
    choices: tuple | None = None
    help: str = ""


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise CliError(f"not a boolean: {text!r}")


GLOBAL_OPTS = {
    "seed": Opt(int, 0, help="global random seed"),
    "precision": Opt(str, "float32", ("float32", "float64"), "run precision"),
    "out": Opt(str, None, help="output directory (required)"),
    "params": Opt(str, None, help="key=value parameter file"),
}

COMMANDS: dict[str, dict[str, Opt]] = {
    "verify-equivalence": {
        "trials": Opt(int, 10000, help="random kernel instances"),
        "max_dim": Opt(int, 256),
    },
    "gradcheck": {
        "probes": Opt(int, 100, help="finite-difference probes per target"),
    },
    "energy-report": {
        "config": Opt(str, "130m", tuple(energy.PRESETS)),
        "variant": Opt(str, "ann", energy.VARIANTS),
        "fr_in": Opt(float, 0.0),
        "fr_out": Opt(float, 0.0),
        "k": Opt(int, 1),
        "paper": Opt(_bool, False, help="use embedded reference fire rates "
                                        "and compare against golden values"),
    },
    "train-teacher": {
        "steps": Opt(int, 1200),
        "batch": Opt(int, 16),
        "seq_len": Opt(int, 48),
        "lr": Opt(float, 3e-3),
        "corpus": Opt(str, None, help="UTF-8 text file, one document per line"),
        "corpus_lines": Opt(int, 400, help="synthetic corpus size when no file given"),
    },
    "distill": {
        "teacher": Opt(str, None, help="teacher checkpoint (required)"),
        "neuron": Opt(str, "tilif", ("lif", "ilif", "tilif")),
        "d_max": Opt(int, 4),
        "sgc": Opt(_bool, True),
        "steps": Opt(int, 2000),
        "batch": Opt(int, 8),
        "lr": Opt(float, 1e-3),
        "corpus": Opt(str, None),
        "corpus_lines": Opt(int, 400),
    },
    "rl": {
        "method": Opt(str, None, ("dpo", "kto"), "preference objective (required)"),
        "ckpt": Opt(str, None, help="policy checkpoint (required)"),
        "data": Opt(str, None, help="tab-separated preference records"),
        "steps": Opt(int, 120),
        "batch": Opt(int, 4),
        "lr": Opt(float, 5e-6),
        "beta_pref": Opt(float, 0.1),
        "corpus_lines": Opt(int, 200, help="synthetic preference set size"),
    },
    "eval-ppl": {
        "ckpt": Opt(str, None, help="model checkpoint (required)"),
        "corpus": Opt(str, None, help="UTF-8 text file (required)"),
        "seq_len": Opt(int, 48),
    },
    "activation-hist": {
        "ckpt": Opt(str, None, help="model checkpoint (required)"),
        "layer": Opt(int, 0),
        "site": Opt(str, "u_t", ("u_t", "y_t")),
        "bins": Opt(int, 32),
        "corpus": Opt(str, None),
        "corpus_lines": Opt(int, 400),
        "seq_len": Opt(int, 48),
    },
    "clamp-ablation": {
        "ckpt": Opt(str, None, help="model checkpoint (required)"),
        "mode": Opt(str, "max_to_zero", ("max_to_zero", "max_to_one")),
        "site": Opt(str, "y_t", ("u_t", "y_t")),
        "corpus": Opt(str, None),
        "corpus_lines": Opt(int, 400),
        "seq_len": Opt(int, 48),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> _Parser:
    parser = _Parser(prog="spikessm")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for key, opt in {**GLOBAL_OPTS, **opts}.items():
            kwargs: dict = {"default": None, "help": opt.help}
            if opt.type is _bool:
                kwargs["nargs"] = "?"
                kwargs["const"] = "true"
            if opt.choices:
                kwargs["choices"] = [str(c) for c in opt.choices]
            p.add_argument(f"--{key.replace(chr(95), chr(45))}", dest=key, **kwargs)
    return parser


def load_params_file(path: str, schema: dict[str, Opt]) -> dict[str, Any]:
    if not os.path.exists(path):
        raise CliError(f"parameter file not found: {path}")
    values: dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{ln}: expected key=value")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in schema:
                raise CliError(f"{path}:{ln}: unknown key {key!r}")
            values[key] = val.strip()
    return values


def resolve_options(command: str, args: argparse.Namespace) -> dict[str, Any]:
    schema = {**GLOBAL_OPTS, **COMMANDS[command]}
    resolved = {k: opt.default for k, opt in schema.items()}
    params_path = getattr(args, "params")
    if params_path:
        resolved.update(load_params_file(params_path, schema))
        resolved["params"] = params_path
    for key in schema:
        flag_val = getattr(args, key)
        if flag_val is not None:
            resolved[key] = flag_val
    # normalize types and enforce choices
    for key, opt in schema.items():
        if resolved[key] is None:
            continue
        try:
            resolved[key] = opt.type(resolved[key])
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad value for {key}: {resolved[key]!r} ({exc})")
        if opt.choices and resolved[key] not in opt.choices:
            raise CliError(f"{key} must be one of {opt.choices}")
    if not resolved["out"]:
        raise CliError("--out is required")
    return resolved


def write_resolved(outdir: str, command: str, resolved: dict[str, Any]) -> None:
    os.makedirs(outdir, exist_ok=True)
    lines = [f"command={command}"]
    lines += [f"{k}={resolved[k]}" for k in sorted(resolved) if resolved[k] is not None]
    with open(os.path.join(outdir, "resolved_config.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_corpus(resolved: dict[str, Any]) -> list[str]:
    path = resolved.get("corpus")
    if path:
        if not os.path.exists(path):
            raise CliError(f"corpus file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
        if not lines:
            raise CliError(f"corpus file is empty: {path}")
        return lines
    return synthetic_corpus(resolved.get("corpus_lines", 400) or 400,
                            seed=resolved["seed"])


def _save_corpus(outdir: str, lines: list[str]) -> None:
    with open(os.path.join(outdir, "corpus.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _load_model(path: str) -> LanguageModel:
    if not path:
        raise CliError("a checkpoint path is required")
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return checkpoint.load(path)


def neuron_from(resolved: dict[str, Any]) -> NeuronConfig:
    kind = {"lif": LIF, "ilif": ILIF, "tilif": TILIF}[resolved["neuron"]]
    d_max = 1 if kind == LIF else resolved["d_max"]
    return NeuronConfig(kind=kind, d_max=d_max)


# ---------------------------------------------------------------------------
# commands

def cmd_verify_equivalence(resolved) -> int:
    rng = np.random.default_rng(resolved["seed"])
    trials = resolved["trials"]
    max_dim = resolved["max_dim"]
    kinds = [LIF, ILIF, TILIF]
    worst32 = 0.0
    for i in range(trials):
        kind = kinds[i % 3]
        d_max = 1 if kind == LIF else int(rng.integers(1, 9))
        cfg = NeuronConfig(kind=kind, d_max=d_max)
        d_in = int(rng.integers(1, max_dim + 1))
        d_out = int(rng.integers(1, max_dim + 1))
        s = quantize(cfg, rng.normal(scale=max(1.0, d_max), size=d_in))
        train = expand_spike_train(cfg, s)
        if not np.array_equal(collapse_spike_train(train), s):
            print(f"FAIL round-trip at trial {i}")
            return EXIT_CONTRACT
        # integer-weighted 64-bit arm: all three routes bit-equal
        w_int = rng.integers(-8, 9, size=(d_out, d_in)).astype(np.float64)
        dense = w_int @ s
        if not (np.array_equal(spike_linear_int(w_int, s), dense)
                and np.array_equal(spike_linear_event(w_int, train), dense)):
            print(f"FAIL integer equivalence at trial {i}")
            return EXIT_CONTRACT
        # float32 arm: within 1e-5 absolute
        w32 = (rng.normal(size=(d_out, d_in)) / d_in).astype(np.float32)
        s32 = s.astype(np.float32)
        dense32 = w32 @ s32
        err = max(
            float(np.max(np.abs(spike_linear_int(w32, s32) - dense32), initial=0.0)),
            float(np.max(np.abs(spike_linear_event(w32, train) - dense32), initial=0.0)),
        )
        worst32 = max(worst32, err)
        if err > 1e-5:
            print(f"FAIL float32 equivalence at trial {i}: {err:.2e}")
            return EXIT_CONTRACT
    # exhaustive neuron round trip
    for d_max in range(1, 9):
        cfg = NeuronConfig(kind=TILIF, d_max=d_max)
        s = np.arange(-d_max, d_max + 1, dtype=np.float64)
        if not np.array_equal(collapse_spike_train(expand_spike_train(cfg, s)), s):
            print(f"FAIL exhaustive round-trip at d_max={d_max}")
            return EXIT_CONTRACT
    outdir = resolved["out"]
    with open(os.path.join(outdir, "verify.csv"), "w", encoding="utf-8") as f:
        f.write("check,trials,worst_abs_err_float32,status\n")
        f.write(f"equivalence_triangle,{trials},{worst32:.3e},pass\n")
        f.write("round_trip_exhaustive,8,0,pass\n")
    print(f"equivalence verified over {trials} instances "
          f"(worst float32 error {worst32:.2e})")
    return EXIT_OK


def _gradcheck_targets(rng):
    """(name, loss_fn, params) triples covering every differentiable path."""
    targets = []

    for name in ("tanh", "sigmoid", "silu", "softplus", "exp"):
        x = parameter(rng.normal(size=16) * 0.7)
        probe = Tensor(rng.normal(size=16))
        targets.append((f"op:{name}",
                        lambda n=name, x=x, p=probe: sum_(activation(n, x) * p), [x]))

    x = parameter(rng.normal(size=(4, 6)))
    probe = Tensor(rng.normal(size=(4, 6)))
    targets.append(("op:softmax", lambda: sum_(softmax(x, axis=-1) * probe), [x]))
    w = parameter(rng.normal(size=6) + 1.0)
    targets.append(("op:rmsnorm", lambda: sum_(rmsnorm(x, w, 1e-6) * probe), [x, w]))

    xs = parameter(rng.normal(size=(4, 6)))
    ws = parameter(rng.normal(size=(6, 3)))
    spk = Tensor(rng.normal(size=(4, 3)))
    targets.append(("sgc_path",
                    lambda: hidden_align_loss(spk, sgc_forward(xs, ws, 4)), [xs, ws]))

    t = rng.normal(size=(4, 9))
    sl = parameter(rng.normal(size=(4, 9)))
    targets.append(("kl_loss", lambda: kl_distill_loss(t, sl), [sl]))

    lw, ll = parameter(0.3), parameter(-0.2)
    targets.append(("dpo_loss",
                    lambda: dpo_loss((lw, ll), (0.1, 0.0), 0.7), [lw, ll]))

    lps = [parameter(float(v)) for v in rng.normal(size=3)]
    targets.append(("kto_loss",
                    lambda: kto_loss(lps, [0.0, 0.1, -0.1], [1, -1, 1], 0.5,
                                     z_ref=0.02), lps))

    cfg = Mamba2Config(d_model=8, n_state=4, n_heads=2, d_head=8,
                       n_layers=1, vocab=11)
    params = init_block_params(cfg, rng, 0)
    u = parameter(rng.normal(size=(1, 4, cfg.d_model)))
    bp = Tensor(rng.normal(size=(1, 4, cfg.d_model)))

    def block_loss():
        y, _ = block_forward(params, u, cfg)
        return sum_(y * bp)

    targets.append(("dense_block", block_loss, [u] + [p for _, p in params.named()]))
    return targets


def cmd_gradcheck(resolved) -> int:
    probes = resolved["probes"]
    rows = []
    status = EXIT_OK
    with dtype_scope("float64"):
        rng = np.random.default_rng(resolved["seed"])
        for name, loss_fn, params in _gradcheck_targets(rng):
            err = check_gradients(loss_fn, params, rng, probes=probes)
            ok = err < REL_TOL
            rows.append((name, err, ok))
            print(f"{'pass' if ok else 'FAIL'}  {name:<14} max rel err {err:.3e}")
            if not ok:
                status = EXIT_CONTRACT
    with open(os.path.join(resolved["out"], "gradcheck.csv"), "w",
              encoding="utf-8") as f:
        f.write("target,max_rel_err,tolerance,status\n")
        for name, err, ok in rows:
            f.write(f"{name},{err:.6e},{REL_TOL:.0e},{'pass' if ok else 'fail'}\n")
    return status


def cmd_energy_report(resolved) -> int:
    cfg_name = resolved["config"]
    variant = resolved["variant"]
    outdir = resolved["out"]
    if resolved["paper"]:
        if (cfg_name, variant) not in energy.REFERENCE_ROWS:
            raise CliError(f"no reference row for ({cfg_name}, {variant})")
        report = energy.reference_report(cfg_name, variant)
        errs = energy.compare_to_reference(report)  # ContractError -> exit 2
        print(f"reference comparison: worst cell error "
              f"{max(errs.values()):.3%} (tolerance 0.5%)")
    else:
        report = energy.compute_report(
            energy.PRESETS[cfg_name], variant, fr_in=resolved["fr_in"],
            fr_out=resolved["fr_out"], k=resolved["k"], config=cfg_name)
    table = energy.to_table([report])
    print(table, end="")
    with open(os.path.join(outdir, "energy.csv"), "w", encoding="utf-8") as f:
        f.write(energy.to_csv([report]))
    with open(os.path.join(outdir, "energy.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    return EXIT_OK


def cmd_train_teacher(resolved) -> int:
    lines = load_corpus(resolved)
    outdir = resolved["out"]
    _save_corpus(outdir, lines)
    rng = np.random.default_rng(resolved["seed"])
    model = LanguageModel(toy_config(mode=DENSE), rng)
    rows = train_teacher(model, lines, steps=resolved["steps"],
                         batch=resolved["batch"], seq_len=resolved["seq_len"],
                         lr=resolved["lr"], seed=resolved["seed"])
    write_metrics_csv(os.path.join(outdir, "metrics.csv"), rows, TRAIN_FIELDS)
    checkpoint.save(os.path.join(outdir, "teacher.spkm"), model)
    ppl = eval_ppl(model, lines, seq_len=resolved["seq_len"])
    with open(os.path.join(outdir, "eval.csv"), "w", encoding="utf-8") as f:
        f.write("metric,value\nppl,%.6f\n" % ppl)
    print(f"teacher trained: final loss {rows[-1]['loss']:.4f}, ppl {ppl:.4f}")
    return EXIT_OK


def cmd_distill(resolved) -> int:
    teacher = _load_model(resolved["teacher"])
    if teacher.cfg.mode != DENSE:
        raise CliError("the teacher checkpoint must be a dense-mode model")
    lines = load_corpus(resolved)
    outdir = resolved["out"]
    _save_corpus(outdir, lines)
    student = teacher.clone(mode=SPIKING, neuron=neuron_from(resolved),
                            sgc=resolved["sgc"])
    result = distill_run(teacher, student, lines, steps=resolved["steps"],
                         batch=resolved["batch"], lr=resolved["lr"],
                         seed=resolved["seed"])
    write_metrics_csv(os.path.join(outdir, "metrics.csv"), result.metrics,
                      DISTILL_FIELDS)
    checkpoint.save(os.path.join(outdir, "student.spkm"), student)
    ppl = eval_ppl(student, lines)
    with open(os.path.join(outdir, "eval.csv"), "w", encoding="utf-8") as f:
        f.write("metric,value\nppl,%.6f\ninitial_kl,%.6f\nfinal_kl,%.6f\n"
                % (ppl, result.initial_kl, result.final_kl))
    print(f"distilled: kl {result.initial_kl:.4f} -> {result.final_kl:.4f}, "
          f"student ppl {ppl:.4f}")
    return EXIT_OK


def cmd_rl(resolved) -> int:
    if not resolved["method"]:
        raise CliError("--method is required")
    policy = _load_model(resolved["ckpt"])
    outdir = resolved["out"]
    if resolved["data"]:
        if not os.path.exists(resolved["data"]):
            raise CliError(f"preference file not found: {resolved['data']}")
        examples = load_preference_file(resolved["data"], resolved["method"])
    else:
        lines = synthetic_corpus(200, seed=resolved["seed"])
        pref_lines = synth_preference_lines(lines, resolved["corpus_lines"],
                                            resolved["seed"], resolved["method"])
        path = os.path.join(outdir, "preferences.tsv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(pref_lines) + "\n")
        examples = load_preference_file(path, resolved["method"])
    rows = rl_run(policy, examples, method=resolved["method"],
                  steps=resolved["steps"], batch=resolved["batch"],
                  lr=resolved["lr"], beta_pref=resolved["beta_pref"],
                  seed=resolved["seed"])
    write_metrics_csv(os.path.join(outdir, "metrics.csv"), rows, TRAIN_FIELDS)
    checkpoint.save(os.path.join(outdir, "aligned.spkm"), policy)
    print(f"{resolved['method']} finished: loss {rows[0]['loss']:.4f} -> "
          f"{rows[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_eval_ppl(resolved) -> int:
    model = _load_model(resolved["ckpt"])
    if not resolved["corpus"]:
        raise CliError("--corpus is required")
    lines = load_corpus(resolved)
    ppl = eval_ppl(model, lines, seq_len=resolved["seq_len"])
    with open(os.path.join(resolved["out"], "eval.csv"), "w",
              encoding="utf-8") as f:
        f.write("metric,value\nppl,%.6f\n" % ppl)
    print(f"ppl {ppl:.6f}")
    return EXIT_OK


def _collect_site(model, lines, layer, site, seq_len):
    stream = token_stream(lines)
    width = seq_len + 1
    n = max(1, stream.size // width)
    windows = stream[: n * width].reshape(n, width)[:, :-1]
    grabbed = []

    def hook(li, at, data):
        if li == layer and at == site:
            grabbed.append(data.reshape(-1).copy())
        return data

    for i in range(0, n, 16):
        model.forward_batch(windows[i:i + 16], hook=hook)
    return np.concatenate(grabbed)


def cmd_activation_hist(resolved) -> int:
    model = _load_model(resolved["ckpt"])
    if not 0 <= resolved["layer"] < model.cfg.n_layers:
        raise CliError(f"layer must be in [0, {model.cfg.n_layers})")
    lines = load_corpus(resolved)
    values = _collect_site(model, lines, resolved["layer"], resolved["site"],
                           resolved["seq_len"])
    bins = resolved["bins"]
    if bins < 1:
        raise CliError("bins must be >= 1")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    path = os.path.join(resolved["out"], "activation_hist.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("value_lo,value_hi,count\n")
        for i, c in enumerate(counts):
            f.write(f"{edges[i]:.6f},{edges[i + 1]:.6f},{int(c)}\n")
    print(f"histogram over {values.size} activations written to {path}")
    return EXIT_OK


def cmd_clamp_ablation(resolved) -> int:
    model = _load_model(resolved["ckpt"])
    lines = load_corpus(resolved)
    base = eval_ppl(model, lines, seq_len=resolved["seq_len"])
    hook = make_clamp_hook(resolved["mode"], resolved["site"])
    stream = token_stream(lines)
    width = resolved["seq_len"] + 1
    n = stream.size // width
    windows = stream[: n * width].reshape(n, width)
    total, count = 0.0, 0
    for i in range(0, n, 16):
        chunk = windows[i:i + 16]
        logits, _ = model.forward_batch(chunk[:, :-1], hook=hook)
        ce = cross_entropy_loss(logits, chunk[:, 1:]).item()
        total += ce * chunk[:, 1:].size
        count += chunk[:, 1:].size
    clamped = float(np.exp(total / count))
    path = os.path.join(resolved["out"], "clamp_ablation.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("mode,site,ppl_off,ppl_clamped,delta\n")
        f.write(f"{resolved['mode']},{resolved['site']},{base:.6f},"
                f"{clamped:.6f},{clamped - base:.6f}\n")
    print(f"clamp {resolved['mode']} at {resolved['site']}: "
          f"ppl {base:.4f} -> {clamped:.4f}")
    return EXIT_OK


HANDLERS = {
    "verify-equivalence": cmd_verify_equivalence,
    "gradcheck": cmd_gradcheck,
    "energy-report": cmd_energy_report,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "rl": cmd_rl,
    "eval-ppl": cmd_eval_ppl,
    "activation-hist": cmd_activation_hist,
    "clamp-ablation": cmd_clamp_ablation,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        resolved = resolve_options(args.command, args)
        set_default_dtype(resolved["precision"])
        write_resolved(resolved["out"], args.command, resolved)
        return HANDLERS[args.command](resolved)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ContractError, DimensionError, NumericError) as exc:
        print(f"contract failure: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    finally:
        set_default_dtype("float32")


if __name__ == "__main__":
    sys.exit(main())
