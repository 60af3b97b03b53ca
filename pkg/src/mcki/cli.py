"""Command-line entry point.

The CLI is a thin client of the HTTP service: it resolves configuration
(flags > config file > defaults), ships case records and checkpoints in
request bodies, and writes the returned artifacts to local files. Without
--service-url (or MCKI_SERVICE_URL) it drives an in-process instance of the
same app, so no deployment is needed for local runs.

Exit codes: 0 success, 1 evaluation failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import httpx

from .harness import emit_report, render_report_text
from .judge import JUDGE_URL_VAR
from .methods import DEFAULT_MAX_DEMOS, DEFAULT_WRAP_TEMPLATE, METHOD_NAMES
from .scoring import JUDGE, ROUGE_L

SERVICE_URL_VAR = "MCKI_SERVICE_URL"
BACKEND_URL_VAR = "BACKEND_URL"

_DEFAULTS: dict[str, object] = {
    "method": "base",
    "backend": "synthetic",
    "scorer": ROUGE_L,
    "seed": 0,
    "order": "en,zh,ar",
    "workers": 1,
    "out": "runs",
    "retention": False,
    "accumulate": False,
    "mcki.wrap_template": DEFAULT_WRAP_TEMPLATE,
    "mcki.tau": None,
    "ike.max_demos": DEFAULT_MAX_DEMOS,
    "router.gamma": 20.0,
    "router.lambda_neg": 1.0,
    "router.w_cross_language": 1.0,
    "router.w_cross_scenario": 1.5,
    "router.learning_rate": 1e-3,
    "router.epochs": 1,
    "router.d_route": 1024,
    "synthetic.d_model": 64,
    "synthetic.noise_scale": 0.05,
    "synthetic.separation": 0.8,
    "judge.retries": 3,
    "judge.max_tokens": 256,
    "prompts.en": "",
    "prompts.zh": "",
    "prompts.ar": "",
    "bench.n_train": 100,
    "bench.n_eval": 100,
}


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key = value file; # starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _DEFAULTS and key not in ("data", "checkpoint", "run_id"):
            raise CliError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = value.strip()
    return values


def _cast_like(default: object, text: str) -> object:
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


class Resolver:
    """Implements the flags > config file > defaults precedence."""

    def __init__(self, file_values: dict[str, str]):
        self._file = file_values

    def get(self, key: str, flag_value=None):
        if flag_value is not None:
            return flag_value
        default = _DEFAULTS.get(key)
        if key in self._file:
            text = self._file[key]
            if default is None:
                return text
            return _cast_like(default, text)
        return default


def _read_records(path: str) -> list[dict]:
    file_path = Path(path)
    if not file_path.is_file():
        raise CliError(f"data file not found: {path}")
    records = []
    with file_path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return records


def _client(service_url: str | None) -> httpx.Client:
    url = service_url or os.environ.get(SERVICE_URL_VAR, "")
    if url:
        return httpx.Client(base_url=url, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _post(client: httpx.Client, path: str, body: dict) -> dict:
    response = client.post(path, json=body)
    if response.status_code in (400, 422):
        detail = response.json().get("detail", response.text)
        raise CliError(f"request rejected: {detail}", code=2)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except json.JSONDecodeError:
            detail = response.text
        raise CliError(f"run failed: {detail}", code=1)
    return response.json()


def _backend_spec(resolver: Resolver, args) -> dict:
    kind = resolver.get("backend", args.backend)
    if kind not in ("synthetic", "remote"):
        raise CliError(f"unknown backend '{kind}'")
    spec = {
        "kind": kind,
        "seed": int(resolver.get("seed", args.seed)),
        "d_model": int(resolver.get("synthetic.d_model", args.d_model)),
        "noise_scale": float(resolver.get("synthetic.noise_scale", args.noise_scale)),
        "separation": float(resolver.get("synthetic.separation", args.separation)),
    }
    if kind == "remote":
        url = args.backend_url or os.environ.get(BACKEND_URL_VAR, "")
        if not url:
            raise CliError(f"remote backend requires --backend-url or {BACKEND_URL_VAR}")
        spec["url"] = url
    return spec


def _hyper_spec(resolver: Resolver, args) -> dict:
    return {
        "gamma": float(resolver.get("router.gamma", args.gamma)),
        "lambda_neg": float(resolver.get("router.lambda_neg", args.lambda_neg)),
        "w_cross_language": float(
            resolver.get("router.w_cross_language", args.w_cross_language)
        ),
        "w_cross_scenario": float(
            resolver.get("router.w_cross_scenario", args.w_cross_scenario)
        ),
        "learning_rate": float(resolver.get("router.learning_rate", args.lr)),
        "epochs": int(resolver.get("router.epochs", args.epochs)),
        "seed": int(resolver.get("seed", args.seed)),
        "d_route": int(resolver.get("router.d_route", args.d_route)),
    }


def _prompts(resolver: Resolver) -> dict:
    return {
        code: str(resolver.get(f"prompts.{code}"))
        for code in ("en", "zh", "ar")
        if str(resolver.get(f"prompts.{code}"))
    }


def _scorer_kinds(value: str) -> list[str]:
    if value == "both":
        return [ROUGE_L, JUDGE]
    if value in (ROUGE_L, JUDGE):
        return [value]
    raise CliError(f"unknown scorer '{value}' (use rouge_l, judge, or both)")


def _load_checkpoint_file(path: str | None, *, required: bool) -> dict | None:
    if not path:
        if required:
            raise CliError("method 'mcki' requires --checkpoint")
        return None
    file_path = Path(path)
    if not file_path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return json.loads(file_path.read_text(encoding="utf-8"))


def cmd_train_router(args) -> int:
    resolver = Resolver(parse_config_file(args.config) if args.config else {})
    data = resolver.get("data", args.data)
    if not data:
        raise CliError("train-router requires --data")
    records = _read_records(str(data))
    body = {
        "records": records,
        "backend": _backend_spec(resolver, args),
        "hyper": _hyper_spec(resolver, args),
    }
    with _client(args.service_url) as client:
        result = _post(client, "/train-router", body)
    out_path = Path(resolver.get("checkpoint", args.checkpoint) or "router.ckpt")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(result["checkpoint"]), encoding="utf-8")
    summary = result["score_summary"]
    print(f"checkpoint written to {out_path}")
    print(f"tau = {result['tau']:.6f}  calibration accuracy = {result['accuracy']:.4f}")
    for side in ("positives", "negatives"):
        stats = summary.get(side, {})
        if stats.get("count"):
            print(
                f"{side}: n={stats['count']} min={stats['min']:.4f} "
                f"mean={stats['mean']:.4f} max={stats['max']:.4f}"
            )
        else:
            print(f"{side}: n=0")
    return 0


def cmd_eval(args) -> int:
    resolver = Resolver(parse_config_file(args.config) if args.config else {})
    data = resolver.get("data", args.data)
    if not data:
        raise CliError("eval requires --data")
    method = resolver.get("method", args.method)
    if method not in METHOD_NAMES:
        raise CliError(f"unknown method '{method}'")
    scorer_value = str(resolver.get("scorer", args.scorer))
    kinds = _scorer_kinds(scorer_value)
    if JUDGE in kinds and not os.environ.get(JUDGE_URL_VAR):
        raise CliError(f"judge scoring requires the {JUDGE_URL_VAR} environment variable")
    checkpoint = _load_checkpoint_file(
        resolver.get("checkpoint", args.checkpoint), required=method == "mcki"
    )
    records = _read_records(str(data))
    backend = _backend_spec(resolver, args)
    order = str(resolver.get("order", args.order))
    tau_override = resolver.get("mcki.tau", args.tau)
    config_echo = {
        "command": f"eval-{args.mode}",
        "data": str(data),
        "method": method,
        "backend": backend["kind"],
        "scorer": scorer_value,
        "seed": backend["seed"],
        "order": order,
        "workers": int(resolver.get("workers", args.workers)),
        "retention": bool(resolver.get("retention", True if args.retention else None)),
        "accumulate": bool(resolver.get("accumulate", True if args.accumulate else None)),
        "wrap_template": str(resolver.get("mcki.wrap_template", args.wrap_template)),
        "max_demos": int(resolver.get("ike.max_demos", args.max_demos)),
        "tau_override": None if tau_override is None else float(tau_override),
        "system_prompts": _prompts(resolver),
        "synthetic": {
            "d_model": backend["d_model"],
            "noise_scale": backend["noise_scale"],
            "separation": backend["separation"],
        },
    }
    if checkpoint is not None:
        config_echo["checkpoint_tau"] = checkpoint.get("tau")
        config_echo["checkpoint_hyper"] = checkpoint.get("hyper")
    run_id = args.run_id or (
        f"{args.mode}-{method}-{backend['kind']}-seed{backend['seed']}"
    )
    config_echo["run_id"] = run_id
    body = {
        "mode": args.mode,
        "records": records,
        "method": method,
        "scorers": kinds,
        "backend": backend,
        "checkpoint": checkpoint,
        "tau_override": config_echo["tau_override"],
        "wrap_template": config_echo["wrap_template"],
        "max_demos": config_echo["max_demos"],
        "order": order,
        "retention": config_echo["retention"],
        "workers": config_echo["workers"],
        "accumulate_memory": config_echo["accumulate"],
        "system_prompts": config_echo["system_prompts"],
        "judge": {
            "retries": int(resolver.get("judge.retries")),
            "max_tokens": int(resolver.get("judge.max_tokens")),
        },
        "config_echo": config_echo,
    }
    with _client(args.service_url) as client:
        result = _post(client, "/eval", body)
    report = result["report"]
    out_dir = Path(str(resolver.get("out", args.out)))
    paths = emit_report(report, out_dir, run_id)
    print(render_report_text(report))
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_bench(args) -> int:
    resolver = Resolver(parse_config_file(args.config) if args.config else {})
    data = resolver.get("data", args.data)
    if not data:
        raise CliError("bench requires --data")
    method = resolver.get("method", args.method)
    if method not in METHOD_NAMES:
        raise CliError(f"unknown method '{method}'")
    n_train = int(resolver.get("bench.n_train", args.n_train))
    n_eval = int(resolver.get("bench.n_eval", args.n_eval))
    if args.n is not None:
        n_train = n_eval = int(args.n)
    checkpoint = _load_checkpoint_file(
        resolver.get("checkpoint", args.checkpoint), required=method == "mcki"
    )
    records = _read_records(str(data))
    backend = _backend_spec(resolver, args)
    run_id = args.run_id or f"bench-{method}-{backend['kind']}-seed{backend['seed']}"
    config_echo = {
        "command": "bench",
        "data": str(data),
        "method": method,
        "backend": backend["kind"],
        "seed": backend["seed"],
        "n_train": n_train,
        "n_eval": n_eval,
        "run_id": run_id,
    }
    body = {
        "records": records,
        "method": method,
        "backend": backend,
        "checkpoint": checkpoint,
        "n_train": n_train,
        "n_eval": n_eval,
        "wrap_template": str(resolver.get("mcki.wrap_template", args.wrap_template)),
        "max_demos": int(resolver.get("ike.max_demos", args.max_demos)),
        "system_prompts": _prompts(resolver),
        "config_echo": config_echo,
    }
    with _client(args.service_url) as client:
        result = _post(client, "/bench", body)
    report = result["report"]
    out_dir = Path(str(resolver.get("out", args.out)))
    paths = emit_report(report, out_dir, run_id)
    print(render_report_text(report))
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.render)
    if not path.is_file():
        raise CliError(f"report file not found: {path}")
    report = json.loads(path.read_text(encoding="utf-8"))
    text = render_report_text(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--service-url", help=f"remote service URL (or {SERVICE_URL_VAR})")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--backend", choices=["synthetic", "remote"], default=None)
    parser.add_argument("--backend-url", default=None, help=f"remote backend URL (or {BACKEND_URL_VAR})")
    parser.add_argument("--d-model", type=int, default=None, help="synthetic feature dimension")
    parser.add_argument("--noise-scale", type=float, default=None)
    parser.add_argument("--separation", type=float, default=None)


def _add_hyper(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--gamma", type=float, default=None)
    parser.add_argument("--lambda-neg", type=float, default=None)
    parser.add_argument("--w-cross-language", type=float, default=None)
    parser.add_argument("--w-cross-scenario", type=float, default=None)
    parser.add_argument("--d-route", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcki",
        description="Memory-conditioned knowledge insertion engine and eval harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train-router", help="train the router and calibrate tau")
    p_train.add_argument("--data", help="training case file (JSON lines)")
    p_train.add_argument("--checkpoint", help="output checkpoint path")
    _add_common(p_train)
    _add_hyper(p_train)
    p_train.set_defaults(func=cmd_train_router)

    p_eval = sub.add_parser("eval", help="run a single- or sequential-insert evaluation")
    p_eval.add_argument("--mode", choices=["single", "sequential"], required=True)
    p_eval.add_argument("--data", help="evaluation case file (JSON lines)")
    p_eval.add_argument("--method", choices=list(METHOD_NAMES), default=None)
    p_eval.add_argument("--checkpoint", help="router checkpoint (required for mcki)")
    p_eval.add_argument("--scorer", choices=["rouge_l", "judge", "both"], default=None)
    p_eval.add_argument("--order", default=None, help="sequential partition order, e.g. ar,zh,en")
    p_eval.add_argument("--retention", action="store_true", default=None)
    p_eval.add_argument("--accumulate", action="store_true", default=None,
                        help="keep memory across cases instead of per-case reset")
    p_eval.add_argument("--tau", type=float, default=None, help="override calibrated tau")
    p_eval.add_argument("--wrap-template", default=None)
    p_eval.add_argument("--max-demos", type=int, default=None)
    p_eval.add_argument("--workers", type=int, default=None)
    p_eval.add_argument("--out", default=None, help="report output directory")
    p_eval.add_argument("--run-id", default=None)
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="measure per-case timing")
    p_bench.add_argument("--data", help="case file (JSON lines)")
    p_bench.add_argument("--method", choices=list(METHOD_NAMES), default=None)
    p_bench.add_argument("--checkpoint", help="router checkpoint (required for mcki)")
    p_bench.add_argument("--n", type=int, default=None, help="sets both --n-train and --n-eval")
    p_bench.add_argument("--n-train", type=int, default=None)
    p_bench.add_argument("--n-eval", type=int, default=None)
    p_bench.add_argument("--wrap-template", default=None)
    p_bench.add_argument("--max-demos", type=int, default=None)
    p_bench.add_argument("--out", default=None)
    p_bench.add_argument("--run-id", default=None)
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_report = sub.add_parser("report", help="render a report file as text")
    p_report.add_argument("--render", required=True, help="path to a .report file")
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except httpx.HTTPError as exc:
        print(f"error: service request failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
