"""Command-line entry point: ``recurformer <command> [--config FILE] [--key value ...]``.

Every command reads its parameters from three layers, later ones winning:
built-in defaults, an optional config file, and command-line flags. The config
file is line-oriented ``key = value`` text with ``[global]`` and
``[<command>]`` sections; unknown sections or keys are rejected. The resolved
parameters are echoed to ``<out>/config.txt``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 experiment failure (diverged training, cache ledger mismatch).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import random
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import recency, tasks
from .attention import AttentionConfig
from .cache import (
    LedgerMismatchError,
    check_ledger,
    fraction_table,
    measured_stats,
    write_fraction_csv,
    write_stats_csv,
)
from .model import (
    ModelConfig,
    RecurFormer,
    convert_model,
    load_checkpoint,
    save_checkpoint,
    select_heads,
)
from .ssm import MambaConfig
from .tensor import CheckpointError, ContractError
from .training import (
    CharCorpus,
    MQARTask,
    TrainConfig,
    TrainingDiverged,
    continual_train,
    mqar_accuracy,
    mqar_eval_batches,
    pretrain,
    train_mqar_ablation,
    write_ablation_csv,
)

log = logging.getLogger("recurformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAILURE = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parameter schema


def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def int_pair(s: str) -> tuple[int, int]:
    v = int_list(s)
    if len(v) != 2 or v[0] > v[1]:
        raise ValueError(f"expected 'lo,hi' with lo <= hi, got {s!r}")
    return v


def choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"{s!r} is not one of {', '.join(options)}")
        return s

    parse.__name__ = "|".join(options)
    return parse


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Param:
    name: str
    parse: Callable[[str], Any]
    default: str
    help: str


GLOBAL = [
    Param("seed", int, "0", "seed for every random draw"),
    Param("out", str, "out", "output directory"),
    Param("precision", choice("float32", "float64"), "float32", "floating-point precision of the model"),
]

SHAPE = [
    Param("n_layers", int, "2", "decoder layers"),
    Param("d_model", int, "128", "model width"),
    Param("n_heads", int, "8", "query heads per layer"),
    Param("n_kv_heads", int, "4", "key/value heads per layer"),
    Param("mamba_k_epd", float, "2", "Mamba expand factor"),
    Param("mamba_d_conv", int, "4", "Mamba convolution width"),
    Param("mamba_d_state", int, "16", "Mamba state size"),
    Param("mamba_dt_rank", int, "0", "Mamba dt rank (0 = derive from width)"),
]

OPTIM = [
    Param("steps", int, "2000", "optimizer steps"),
    Param("learning_rate", float, "1e-3", "peak learning rate"),
    Param("batch_size", int, "32", "sequences per step"),
    Param("warmup_steps", int, "100", "linear warmup steps"),
    Param("weight_decay", float, "0.01", "decoupled weight decay on matrices"),
    Param("grad_clip", float, "1.0", "gradient norm clip"),
]


def defaults(params: list[Param], **values: str) -> list[Param]:
    """The same parameters with some defaults replaced."""
    unknown = set(values) - {p.name for p in params}
    if unknown:
        raise KeyError(f"no such parameters: {sorted(unknown)}")
    return [replace(p, default=values.get(p.name, p.default)) for p in params]


MQAR_EVAL = [
    Param("n_keys", int, "64", "MQAR key vocabulary"),
    Param("n_values", int, "64", "MQAR value vocabulary"),
    Param("test_pairs", int_list, "4,16,64", "evaluation pair counts"),
    Param("test_lengths", int_list, "128,256,512,1024", "evaluation sequence lengths"),
    Param("eval_samples", int, "64", "sequences per evaluation cell"),
    Param("eval_batch", int, "16", "sequences per evaluation batch"),
]

CORPUS = [
    Param("corpus_docs", int, "2000", "solved HashHop documents in the training stream"),
    Param("h_e", int, "4", "HashHop element length"),
    Param("h_p", int, "8", "HashHop chain links"),
    Param("h_l", int, "256", "HashHop rendered length"),
    Param("seq_len", int, "128", "training window length"),
]

COMMANDS: dict[str, tuple[str, list[Param]]] = {
    "analyze": (
        "record attention on sample sequences and write RR / RA-I / contribution tables",
        [
            Param("checkpoint", str, "", "model checkpoint directory (required)"),
            Param("samples", str, "", "sample file; empty draws uniform random token ids"),
            Param("sample_format", choice("ids", "text"), "ids", "ids: one line of token ids per sample; text: character windows"),
            Param("n_samples", int, "8", "number of samples"),
            Param("length", int, "128", "tokens per sample"),
            Param("band_k", int, "0", "recency band half-width (0 = ceil(length / 10))"),
            Param("rr_threshold", float, "0.8", "RR above this counts towards RA-I"),
            Param("exclude_first_token", parse_bool, "true", "drop column 0 from the RR sums"),
            Param("save_records", parse_bool, "false", "also write per-sample attention records"),
        ],
    ),
    "convert": (
        "replace the highest-RA-I heads of a base checkpoint with Mamba blocks",
        [
            Param("checkpoint", str, "", "base checkpoint directory (required)"),
            Param("report", str, "", "RA-I table written by analyze (required)"),
            Param("beta", float, "0.5", "fraction of all heads to replace"),
        ],
    ),
    "train-mqar": (
        "train one model per beta on MQAR and evaluate the length/pair grid",
        [
            Param("betas", float_list, "0,0.5,1", "replacement fractions (heads replaced in index order per layer)"),
            # the reduced Mamba keeps three arms inside a one-hour CPU budget
            *defaults(SHAPE, mamba_k_epd="1", mamba_d_state="4"),
            *defaults(OPTIM, steps="4600"),
            Param("train_pairs", int_pair, "2,64", "training pair-count range"),
            Param("train_lengths", int_pair, "16,256", "training length range"),
            Param("curriculum_steps", int, "3000", "initial steps drawn from the curriculum ranges (0 = none)"),
            Param("curriculum_pairs", int_pair, "2,8", "curriculum pair-count range"),
            Param("curriculum_lengths", int_pair, "16,32", "curriculum length range"),
            *MQAR_EVAL,
            Param("grid", parse_bool, "true", "evaluate the generalization grid"),
            Param("save_checkpoints", parse_bool, "true", "write a checkpoint per beta"),
        ],
    ),
    "continual-train": (
        "next-token training on the synthetic corpus; with a hybrid, log the frozen base loss alongside",
        [
            Param("base", str, "", "base checkpoint (empty: fresh pure-attention model of the given shape)"),
            Param("hybrid", str, "", "converted hybrid checkpoint to train against the base"),
            *SHAPE,
            *OPTIM,
            *CORPUS,
        ],
    ),
    "eval-hashhop": (
        "greedy HashHop reconstruction scored by h_gq",
        [
            Param("checkpoint", str, "", "model checkpoint (required unless answerer=echo)"),
            Param("answerer", choice("model", "echo"), "model", "echo follows the pairs exactly"),
            Param("n_instances", int, "8", "instances to score"),
            Param("h_e", int, "4", "element length"),
            Param("h_p", int, "8", "chain links"),
            Param("h_l", int, "256", "rendered length"),
        ],
    ),
    "eval-mqar": (
        "MQAR accuracy of a checkpoint over a pair/length grid",
        [Param("checkpoint", str, "", "model checkpoint (required)"), *MQAR_EVAL],
    ),
    "cache-report": (
        "closed-form cache fractions over a beta sweep, optionally checked against live sessions",
        [
            Param("betas", float_list, "0,0.25,0.5,0.75,0.9,1", "replacement fractions"),
            Param("lengths", int_list, "10240,61440", "token counts for the closed form"),
            Param("n_layers", int, "32", "layers"),
            Param("n_heads", int, "32", "query heads per layer"),
            Param("n_kv_heads", int, "32", "key/value heads per layer"),
            Param("d_head", int, "128", "head width"),
            Param("mamba_k_epd", float, "2", "Mamba expand factor"),
            Param("mamba_d_conv", int, "4", "Mamba convolution width"),
            Param("mamba_d_state", int, "16", "Mamba state size"),
            Param("mamba_dt_rank", int, "256", "Mamba dt rank (0 = derive from width)"),
            Param("report", str, "", "optional RA-I table choosing which heads go first"),
            Param("measure", parse_bool, "false", "also run random-weight sessions of this shape and check the ledger"),
            Param("prompt_length", int, "64", "prefill tokens for measurement"),
            Param("generate", int, "64", "generation steps for measurement"),
        ],
    ),
    "gen-task": (
        "write task instances (and a token/text file usable by analyze)",
        [
            Param("task", choice("hashhop", "mqar"), "mqar", "task family"),
            Param("n_instances", int, "4", "instances to write"),
            Param("h_e", int, "4", "HashHop element length"),
            Param("h_p", int, "8", "HashHop chain links"),
            Param("h_l", int, "256", "HashHop rendered length"),
            Param("n_pairs", int, "8", "MQAR key-value pairs"),
            Param("length", int, "64", "MQAR sequence length"),
            Param("n_queries", int, "0", "MQAR queries (0 = every key)"),
            Param("n_keys", int, "64", "MQAR key vocabulary"),
            Param("n_values", int, "64", "MQAR value vocabulary"),
        ],
    ),
}

MEASURE_LIMIT = 1 << 16  # n_layers * n_heads * d_head above this is not a toy shape


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recurformer", description="Hybrid attention / Mamba experiments and reports.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (help_text, params) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="config file with [global] and [%s] sections" % name)
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for prm in GLOBAL + params:
            p.add_argument(
                "--" + prm.name.replace("_", "-"),
                dest=prm.name,
                default=None,
                metavar=prm.parse.__name__.upper(),
                help=f"{prm.help} (default: {prm.default or 'none'})",
            )
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then config file, then flags; every value parsed and range-checked."""
    params = GLOBAL + COMMANDS[command][1]
    raw = {p.name: p.default for p in params}
    if args.config:
        cp = configparser.ConfigParser(interpolation=None, strict=True)
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config: {exc}") from None
        for section in cp.sections():
            if section != "global" and section not in COMMANDS:
                raise UsageError(f"unknown config section [{section}]")
            known = {p.name for p in (GLOBAL if section == "global" else GLOBAL + COMMANDS[section][1])}
            for key in cp[section]:
                if key not in known:
                    raise UsageError(f"unknown key {key!r} in [{section}]")
        for section in ("global", command):
            if cp.has_section(section):
                raw.update(cp[section])
    for p in params:
        flag = getattr(args, p.name)
        if flag is not None:
            raw[p.name] = flag
    out = {}
    for p in params:
        try:
            out[p.name] = p.parse(raw[p.name])
        except ValueError as exc:
            raise UsageError(f"{p.name}: {exc}") from None
    return out


def echo_config(command: str, values: dict[str, Any], out: Path) -> None:
    names = {p.name for p in GLOBAL}
    lines = ["[global]"] + [f"{k} = {_fmt(v)}" for k, v in values.items() if k in names]
    lines += ["", f"[{command}]"] + [f"{k} = {_fmt(v)}" for k, v in values.items() if k not in names]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise UsageError(msg)


def _dtype(v: dict[str, Any]) -> torch.dtype:
    return getattr(torch, v["precision"])


def _model_config(v: dict[str, Any], vocab_size: int) -> ModelConfig:
    att = AttentionConfig(v["d_model"], v["n_heads"], v["n_kv_heads"])
    mamba = MambaConfig(1, v["mamba_k_epd"], v["mamba_d_conv"], v["mamba_d_state"], v["mamba_dt_rank"] or None)
    return ModelConfig(v["n_layers"], att, vocab_size, mamba)


def _train_config(v: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        learning_rate=v["learning_rate"],
        batch_size=v["batch_size"],
        steps=v["steps"],
        seed=v["seed"],
        weight_decay=v["weight_decay"],
        grad_clip=v["grad_clip"],
        warmup_steps=v["warmup_steps"],
    )


def _mqar_task(v: dict[str, Any], **train) -> MQARTask:
    for p, l in ((p, l) for p in v["test_pairs"] for l in v["test_lengths"]):
        _require(p >= 1 and l >= 4, f"bad grid cell ({p}, {l})")
    _require(v["eval_samples"] > 0 and v["eval_batch"] > 0, "eval_samples and eval_batch must be positive")
    _require(v["n_keys"] >= 1 and v["n_values"] >= 1, "n_keys and n_values must be positive")
    _require(all(p <= v["n_keys"] for p in v["test_pairs"]), "test_pairs exceed n_keys")
    return MQARTask(
        vocab=tasks.MQARVocab(v["n_keys"], v["n_values"]),
        test_pairs=v["test_pairs"],
        test_lengths=v["test_lengths"],
        eval_samples=v["eval_samples"],
        eval_batch=v["eval_batch"],
        **train,
    )


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load(path: str, dtype: torch.dtype | None = None) -> RecurFormer:
    model = load_checkpoint(path)
    if dtype is not None:
        model = model.to(dtype)
    model.eval()
    return model


# ---------------------------------------------------------------- commands


def cmd_analyze(v: dict[str, Any], out: Path) -> None:
    _require(bool(v["checkpoint"]), "analyze needs --checkpoint")
    _require(v["n_samples"] > 0 and v["length"] > 1, "n_samples must be positive and length at least 2")
    band = v["band_k"] or math.ceil(v["length"] / 10)
    cfg = recency.RRConfig(band, v["rr_threshold"], v["exclude_first_token"])
    model = _load(v["checkpoint"], _dtype(v))
    _require(model.assignment.n_replaced == 0, "analyze expects a pure-attention checkpoint")
    samples = _analysis_samples(v, model.cfg.vocab_size)
    records = []
    with torch.no_grad():
        for i, ids in enumerate(samples):
            _, recs = model(torch.tensor(ids, dtype=torch.long)[None], record=True)
            sample = [layer[0] for layer in recs]
            records.append(sample)
            if v["save_records"]:
                (out / "records").mkdir(exist_ok=True)
                recency.save_records(out / "records" / f"sample{i:04d}.rft", sample)
    report = recency.build_report(records, cfg)
    recency.write_rr_csv(report, out / "rr.csv")
    recency.write_rai_csv(report, out / "rai.csv")
    recency.write_ranking_csv(report, out / "ranking.csv")
    recency.write_contribution_csv(recency.contribution_stats(records), out / "contribution.csv")
    recency.write_rr_config(cfg, out / "rr_config.json")


def _analysis_samples(v: dict[str, Any], vocab_size: int) -> list[list[int]]:
    n, length = v["n_samples"], v["length"]
    if not v["samples"]:
        rng = random.Random(v["seed"])
        return [[rng.randrange(vocab_size) for _ in range(length)] for _ in range(n)]
    try:
        text = Path(v["samples"]).read_text()
    except OSError as exc:
        raise recency.InputError(f"cannot read samples: {exc}") from None
    if v["sample_format"] == "ids":
        rows = [[int(t) for t in line.split()] for line in text.splitlines() if line.strip()]
        rows = [r[:length] for r in rows[:n]]
    else:
        ids = tasks.CharTokenizer().encode(text)
        rows = [ids[i * length : (i + 1) * length] for i in range(n)]
    if len(rows) < n or any(len(r) != length for r in rows):
        raise recency.InputError(f"samples file does not hold {n} samples of {length} tokens")
    if any(t < 0 or t >= vocab_size for r in rows for t in r):
        raise recency.InputError(f"sample token id outside [0, {vocab_size})")
    return rows


def cmd_convert(v: dict[str, Any], out: Path) -> None:
    _require(bool(v["checkpoint"]) and bool(v["report"]), "convert needs --checkpoint and --report")
    _require(0.0 <= v["beta"] <= 1.0, f"beta must lie in [0, 1], got {v['beta']}")
    base = _load(v["checkpoint"])
    ra = recency.read_rai_csv(v["report"])
    shape = (base.cfg.n_layers, base.cfg.attention.n_heads)
    if ra.shape != shape:
        raise recency.InputError(f"report covers {ra.shape}, checkpoint has {shape}")
    hybrid = convert_model(base, ra, v["beta"], seed=v["seed"])
    save_checkpoint(hybrid, out / "model", {"beta": repr(v["beta"]), "source": str(v["checkpoint"])})
    rows = [[l, ",".join(map(str, hybrid.assignment.heads_att(l))), ",".join(map(str, hm))]
            for l, hm in enumerate(hybrid.assignment.heads_m)]
    _write_csv(out / "assignment.csv", ["layer", "heads_att", "heads_m"], rows)


def cmd_train_mqar(v: dict[str, Any], out: Path) -> None:
    _require(all(0.0 <= b <= 1.0 for b in v["betas"]) and v["betas"], "betas must be a nonempty list in [0, 1]")
    for pairs, (lo, hi), what in ((v["train_pairs"], v["train_lengths"], "train"),
                                  (v["curriculum_pairs"], v["curriculum_lengths"], "curriculum")):
        _require(1 <= pairs[0] <= pairs[1] and lo <= hi, f"{what} ranges must be ordered and positive")
        _require(4 * pairs[0] <= lo, f"{what}_pairs minimum must fit 4 * pairs <= length")
        _require(pairs[1] <= v["n_keys"], f"{what}_pairs exceed n_keys")
    _require(0 <= v["curriculum_steps"] <= v["steps"], "curriculum_steps must lie in [0, steps]; lower --curriculum-steps for short runs")
    task = _mqar_task(
        v,
        train_pairs=v["train_pairs"],
        train_lengths=v["train_lengths"],
        curriculum_pairs=v["curriculum_pairs"],
        curriculum_lengths=v["curriculum_lengths"],
        curriculum_steps=v["curriculum_steps"],
    )
    cfg = _train_config(v)
    model_cfg = _model_config(v, task.vocab.size)

    def progress(beta: float, step: int, loss: float) -> None:
        if (step + 1) % 100 == 0:
            log.info("beta=%.2f step %d loss %.4f", beta, step + 1, loss)

    torch.manual_seed(v["seed"])
    results = train_mqar_ablation(v["betas"], model_cfg, task, cfg, eval_grid=v["grid"], progress=progress)
    for beta, r in results.items():
        r.trace.to_csv(out / f"trace_beta{beta:.2f}.csv")
        if v["save_checkpoints"]:
            save_checkpoint(r.model, out / f"model_beta{beta:.2f}", {"beta": repr(beta)})
    write_ablation_csv(results, out / "accuracy.csv")


def cmd_continual_train(v: dict[str, Any], out: Path) -> None:
    _require(not v["hybrid"] or bool(v["base"]), "--hybrid needs --base")
    cfg = _train_config(v)
    corpus_needed = v["seq_len"] + 2
    torch.manual_seed(v["seed"])
    corpus = CharCorpus(v["seed"], v["corpus_docs"], v["h_e"], v["h_p"], v["h_l"])
    if len(corpus.data) < corpus_needed:
        raise UsageError(f"corpus of {len(corpus.data)} characters is shorter than seq_len + 2")
    if v["base"]:
        base = _load(v["base"], _dtype(v))
        if base.cfg.vocab_size != corpus.vocab_size:
            raise CheckpointError(f"base vocabulary {base.cfg.vocab_size} != corpus vocabulary {corpus.vocab_size}")
    else:
        base = RecurFormer(_model_config(v, corpus.vocab_size), seed=v["seed"]).to(_dtype(v))
    if v["hybrid"]:
        hybrid = _load(v["hybrid"], _dtype(v))
        if hybrid.cfg != base.cfg:
            raise CheckpointError("hybrid and base checkpoints have different shapes")
        trace = continual_train(hybrid, base, corpus, cfg, v["seq_len"])
        trained = hybrid
    else:
        trace = pretrain(base, corpus, cfg, v["seq_len"])
        trained = base
    trace.to_csv(out / "trace.csv")
    save_checkpoint(trained, out / "model")


def cmd_eval_hashhop(v: dict[str, Any], out: Path) -> None:
    _require(v["n_instances"] > 0, "n_instances must be positive")
    _require(v["answerer"] == "echo" or bool(v["checkpoint"]), "eval-hashhop needs --checkpoint unless answerer=echo")
    rng = random.Random(v["seed"])
    seeds = [rng.getrandbits(63) for _ in range(v["n_instances"])]
    instances = [tasks.generate_hashhop(s, v["h_e"], v["h_p"], v["h_l"]) for s in seeds]
    model = _load(v["checkpoint"]) if v["answerer"] == "model" else None
    tok = tasks.CharTokenizer()
    if model is not None and model.cfg.vocab_size != tok.vocab_size:
        raise CheckpointError(f"model vocabulary {model.cfg.vocab_size} != HashHop vocabulary {tok.vocab_size}")
    rows = []
    for inst in instances:
        if model is None:
            output: str | list[str] = tasks.echo_oracle(inst)
        else:
            budget = v["h_p"] * (v["h_e"] + len(tasks.ARROW)) + 1
            output = inst.start_element + " " + _greedy(model, tok.encode(inst.render()), budget, tok)
        rows.append([inst.seed, repr(tasks.score_hashhop(inst, output))])
    mean = sum(float(r[1]) for r in rows) / len(rows)
    rows.append(["mean", repr(mean)])
    _write_csv(out / "hashhop.csv", ["seed", "h_gq"], rows)


@torch.no_grad()
def _greedy(model: RecurFormer, prompt: list[int], budget: int, tok: tasks.CharTokenizer) -> str:
    session = model.new_session()
    logits = model(torch.tensor(prompt), session)
    out = []
    for _ in range(budget):
        nxt = int(logits[-1].argmax())
        if tok.chars[nxt] == "\n":
            break
        out.append(nxt)
        logits = model(torch.tensor([nxt]), session)
    return tok.decode(out)


def cmd_eval_mqar(v: dict[str, Any], out: Path) -> None:
    _require(bool(v["checkpoint"]), "eval-mqar needs --checkpoint")
    task = _mqar_task(v)
    model = _load(v["checkpoint"])
    if model.cfg.vocab_size < task.vocab.size:
        raise CheckpointError(f"model vocabulary {model.cfg.vocab_size} < MQAR vocabulary {task.vocab.size}")
    rows = []
    for l in task.test_lengths:
        for p in task.test_pairs:
            if 4 * p > l:
                continue
            acc = mqar_accuracy(model, mqar_eval_batches(task, v["seed"] + 2 + p * 7919 + l, p, l))
            rows.append([p, l, f"{acc:.6f}"])
    _write_csv(out / "accuracy.csv", ["n_pairs", "length", "accuracy"], rows)


def cmd_cache_report(v: dict[str, Any], out: Path) -> None:
    _require(all(0.0 <= b <= 1.0 for b in v["betas"]) and v["betas"], "betas must be a nonempty list in [0, 1]")
    _require(all(l >= 1 for l in v["lengths"]) and v["lengths"], "lengths must be positive")
    att = AttentionConfig(v["n_heads"] * v["d_head"], v["n_heads"], v["n_kv_heads"])
    mamba = MambaConfig(1, v["mamba_k_epd"], v["mamba_d_conv"], v["mamba_d_state"], v["mamba_dt_rank"] or None)
    cfg = ModelConfig(v["n_layers"], att, 64, mamba)
    if v["measure"]:
        _require(v["n_layers"] * att.d_model <= MEASURE_LIMIT, "measure=true is for toy shapes only")
        _require(v["prompt_length"] >= 1 and v["generate"] >= 0, "prompt_length >= 1 and generate >= 0 required")
    ra = None
    if v["report"]:
        ra = recency.read_rai_csv(v["report"])
        if ra.shape != (cfg.n_layers, att.n_heads):
            raise recency.InputError(f"report covers {ra.shape}, shape is {(cfg.n_layers, att.n_heads)}")
    write_fraction_csv(fraction_table(cfg, v["betas"], v["lengths"], ra), v["lengths"], out / "fractions.csv")
    if not v["measure"]:
        return
    ra = np.zeros((cfg.n_layers, att.n_heads), dtype=np.int64) if ra is None else ra
    rng = random.Random(v["seed"])
    prompt = [rng.randrange(cfg.vocab_size) for _ in range(v["prompt_length"])]
    for beta in v["betas"]:
        assignment = select_heads(ra, beta)
        model = RecurFormer(cfg, assignment, seed=v["seed"]).to(_dtype(v)).eval()
        stats = measured_stats(model, prompt, v["generate"])
        check_ledger(stats, cfg, assignment)
        write_stats_csv(stats, cfg, out / f"measured_beta{beta:.2f}.csv")


def cmd_gen_task(v: dict[str, Any], out: Path) -> None:
    _require(v["n_instances"] > 0, "n_instances must be positive")
    rng = random.Random(v["seed"])
    seeds = [rng.getrandbits(63) for _ in range(v["n_instances"])]
    if v["task"] == "hashhop":
        insts = [tasks.generate_hashhop(s, v["h_e"], v["h_p"], v["h_l"]) for s in seeds]
        corpus = "".join(i.render() + i.answer() + "\n" for i in insts)
        (out / "corpus.txt").write_text(corpus)
    else:
        vocab = tasks.MQARVocab(v["n_keys"], v["n_values"])
        insts = [
            tasks.generate_mqar(s, v["n_pairs"], v["length"], vocab.keys, vocab.values, v["n_queries"] or None)
            for s in seeds
        ]
        (out / "tokens.txt").write_text("".join(" ".join(map(str, i.tokens())) + "\n" for i in insts))
    for k, inst in enumerate(insts):
        (out / f"{v['task']}_{k:04d}.txt").write_text(inst.to_text())


HANDLERS = {
    "analyze": cmd_analyze,
    "convert": cmd_convert,
    "train-mqar": cmd_train_mqar,
    "continual-train": cmd_continual_train,
    "eval-hashhop": cmd_eval_hashhop,
    "eval-mqar": cmd_eval_mqar,
    "cache-report": cmd_cache_report,
    "gen-task": cmd_gen_task,
}

USAGE_ERRORS = (UsageError, ContractError, tasks.TaskConfigError)
DATA_ERRORS = (CheckpointError, recency.InputError, tasks.InputError, OSError)
FAILURES = (TrainingDiverged, LedgerMismatchError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        values = resolve(args.command, args)
        out = Path(values["out"])
        out.mkdir(parents=True, exist_ok=True)
        echo_config(args.command, values, out)
        torch.manual_seed(values["seed"])
        HANDLERS[args.command](values, out)
    except FAILURES as exc:
        print(f"recurformer: experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except DATA_ERRORS as exc:
        print(f"recurformer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except USAGE_ERRORS as exc:
        print(f"recurformer: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
