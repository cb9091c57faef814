"""``chip``: keygen, watermark, forge, verify, trace, attack and serve over a workspace directory.

Workspace layout: keys/, master/, users/, reports/, attacks/ under ``--workspace``
(default: CHIP_WORKSPACE or the current directory). Defaults come from
``chip.toml`` in the workspace (flat key = value), overridden by CHIP_*
environment variables, overridden by flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import attacks as A
from . import crypto
from .bundle import load_certificate, load_claim, load_master, load_model, load_signature, save_master, save_signature
from .data import load_idx, pattern_blobs
from .forge import ForgeConfig, Registry, forge_user_triplet, load_passport, save_bundle
from .trainer import TrainConfig, train_master
from .verifier import FIDELITY_MARGIN, TAU_ERROR, IncompatibleModel, canonical_json, trace_traitor, verify_ownership

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("chipwm")

EXIT_OK, EXIT_REFUTED, EXIT_INCOMPATIBLE, EXIT_USAGE = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# settings: flags > env > chip.toml > built-in defaults


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        return {}
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise UsageError(f"{path}: config must be flat key = value, found tables {nested}")
    return doc


def _coerce(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, (list, tuple)):
        cast = type(like[0]) if like else str
        return [cast(s.strip()) for s in text.split(",") if s.strip()]
    if isinstance(like, (int, float)):
        return type(like)(text)
    return text


class Settings:
    def __init__(self, file_values: dict, env=None):
        self.file = file_values
        self.env = os.environ if env is None else env

    def get(self, key: str, flag=None, default=None):
        if flag is not None:
            return flag
        env_key = "CHIP_" + key.upper()
        if env_key in self.env:
            like = self.file.get(key, default)
            try:
                return _coerce(self.env[env_key], like) if like is not None else self.env[env_key]
            except ValueError:
                raise UsageError(f"{env_key}={self.env[env_key]!r} is not a valid value") from None
        return self.file.get(key, default)


# --------------------------------------------------------------------------
# helpers


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        if name in ("keys", "master", "users", "reports", "attacks"):
            return self.root / name
        raise AttributeError(name)

    def inside(self, path) -> Path:
        p = Path(path)
        p = p if p.is_absolute() else self.root / p
        return p


def _stamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _schema(name: str) -> dict:
    return json.loads(resources.files("chipwm").joinpath("schemas", f"{name}.json").read_text())


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        import jsonschema

        jsonschema.validate(payload, _schema(payload["command"]))
        sys.stdout.write(canonical_json(payload))
    else:
        print(human)


def _keys(ws: Workspace, st: Settings, flag=None, secret=True):
    path = ws.inside(st.get("keyfile", flag, "keys/owner.json"))
    if not path.exists():
        raise UsageError(f"key file {path} not found (run `chip keygen` first)")
    keys = crypto.load_keys(path)
    if secret and not isinstance(keys, crypto.ChameleonKeySet):
        raise UsageError(f"{path} holds only a public key; this command needs the trapdoor")
    return keys


def _dataset(ws: Workspace, st: Settings):
    spec_path = ws.master / "data.json"
    spec = json.loads(spec_path.read_text()) if spec_path.exists() else _data_spec(st)
    return _load_data(spec)


def _data_spec(st: Settings, seed=None) -> dict:
    if st.get("train_images"):
        return {"kind": "idx", **{k: str(st.get(k)) for k in
                                  ("train_images", "train_labels", "test_images", "test_labels")}}
    return {"kind": "synthetic", "seed": int(st.get("data_seed", seed, 0)),
            "n_train": int(st.get("n_train", None, 2000)), "n_test": int(st.get("n_test", None, 500))}


def _load_data(spec: dict):
    if spec["kind"] == "idx":
        return load_idx(spec["train_images"], spec["train_labels"], spec["test_images"], spec["test_labels"])
    return pattern_blobs(seed=spec["seed"], n_train=spec["n_train"], n_test=spec["n_test"])


def _split_top_level(item: str) -> list[str]:
    """Splits on commas outside [] so list values survive."""
    parts, depth, cur = [], 0, []
    for ch in item:
        depth += (ch == "[") - (ch == "]")
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        for part in _split_top_level(item):
            if not part.strip():
                continue
            k, sep, v = part.partition("=")
            if not sep:
                raise UsageError(f"parameter {part!r} is not key=value")
            try:
                out[k.strip()] = json.loads(v)
            except json.JSONDecodeError:
                out[k.strip()] = v.strip()
    return out


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# --------------------------------------------------------------------------
# commands


def cmd_keygen(args, ws, st) -> int:
    profile = st.get("profile", args.profile, "standard")
    if profile not in ("toy", "standard"):
        raise UsageError(f"unknown key profile {profile!r}")
    seed_hex = st.get("key_seed", args.seed)
    if seed_hex is None:
        seed = crypto.TOY_SEED if profile == "toy" else os.urandom(32)
    else:
        try:
            digits = seed_hex.lower().removeprefix("0x")
            seed = bytes.fromhex(digits.rjust(len(digits) + len(digits) % 2, "0"))
        except ValueError:
            raise UsageError(f"--seed must be hex, got {seed_hex!r}") from None
    bits = 4 if profile == "toy" else int(st.get("security_bits", args.bits, 256))
    keys = crypto.keygen(bits, seed)
    out = ws.inside(args.out or "keys/owner.json")
    crypto.save_keys(keys, out)
    pub = crypto.save_keys(keys, out.with_name(out.stem + ".pub.json"), include_secret=False)
    p = keys.params
    payload = {"command": "keygen", "profile": p.profile, "path": str(out), "public_path": str(pub),
               "p_bits": p.p.bit_length(), "q_bits": p.q.bit_length(), "g": format(p.g, "x"),
               "y": format(keys.y, "x")}
    _emit(args, payload, f"wrote {out}\nwrote {pub}\nprofile {p.profile}: |p|={p.p.bit_length()} "
                         f"|q|={p.q.bit_length()}")
    return EXIT_OK


def cmd_watermark(args, ws, st) -> int:
    keys = _keys(ws, st, args.keyfile)
    defaults = TrainConfig()
    fields = {}
    for name in TrainConfig.__dataclass_fields__:
        flag = getattr(args, name, None)
        fields[name] = st.get(name, flag, getattr(defaults, name))
    fields["seed"] = int(st.get("seed", args.seed, 0))
    try:
        cfg = TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    text = st.get("licensor_text", args.licensor_text, "Owner")
    spec = _data_spec(st, None)
    data = _load_data(spec)
    try:
        bundle = train_master(data, keys, text, cfg)
    except crypto.CryptoError as exc:
        raise UsageError(str(exc)) from None
    out = ws.master
    hashes = save_master(bundle, out, text, cfg.to_dict())
    free = bundle.model.accuracy(data.x_test, data.y_test, "free")
    aware = bundle.model.accuracy(data.x_test, data.y_test, "aware", bundle.passport)
    sda = float(np.mean(bundle.model.extract_signature(bundle.passport) == bundle.signature.bits))
    metrics = {"free_accuracy": free, "aware_accuracy": aware, "sda": sda, "C": bundle.signature.C,
               "tau_fidelity": aware - FIDELITY_MARGIN}
    _write(out / "metrics.json", json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    _write(out / "data.json", json.dumps(spec, sort_keys=True, indent=2) + "\n")
    payload = {"command": "watermark", "master_dir": str(out), **hashes, **metrics}
    _emit(args, payload, f"wrote {out}\nfree {free:.4f} aware {aware:.4f} SDA {sda:.3f} (C={bundle.signature.C})")
    return EXIT_OK


def cmd_forge(args, ws, st) -> int:
    if (args.users is None) == (args.user_id is None):
        raise UsageError("give exactly one of --users N or --user-id ID")
    keys = _keys(ws, st, args.keyfile)
    if not (ws.master / "model.chpm").exists():
        raise UsageError(f"no master bundle in {ws.master} (run `chip watermark` first)")
    master = load_master(ws.master)
    registry = Registry(ws.users / "registry.jsonl")
    existing = registry.records()
    prior = [load_passport(ws.users / r["user_id"] / "passport.bin") for r in existing]
    taken = {r["user_id"] for r in existing}
    ids = [args.user_id] if args.user_id else []
    k = 0
    while len(ids) < (args.users or 0):
        if f"user{k}" not in taken:
            ids.append(f"user{k}")
        k += 1
    if args.user_id in taken:
        raise UsageError(f"user {args.user_id!r} already exists")
    base = ForgeConfig()
    seed = int(st.get("seed", args.seed, 0))
    minted = []
    for uid in ids:
        idx = len(existing) + len(minted)
        cfg = ForgeConfig(iterations=int(st.get("forge_iterations", args.iterations, base.iterations)),
                          polish_iterations=int(st.get("forge_polish_iterations", None, base.polish_iterations)),
                          lr=float(st.get("forge_lr", None, base.lr)),
                          lambda_dis=float(st.get("forge_lambda_dis", None, base.lambda_dis)),
                          seed=seed + 1000 * (idx + 1))
        t = forge_user_triplet(master.model, master.passport, master.certificate, prior, keys, uid,
                               master.signature, cfg)
        t.minted_at = _stamp()
        d = ws.users / uid
        record = save_bundle(t, d)
        save_signature(master.signature, d / "signature.json")
        registry.append(record)
        prior.append(t.passport)
        minted.append({**record, "dir": str(d), "sda": t.diagnostics["sda"],
                       "max_cosine": t.diagnostics["max_cosine"]})
    payload = {"command": "forge", "users": minted}
    _emit(args, payload, "\n".join(f"wrote {m['dir']} (SDA {m['sda']:.3f}, max cos {m['max_cosine']:.4f})"
                                   for m in minted))
    return EXIT_OK


def _suspect(ws, path):
    p = ws.inside(path)
    if not p.exists():
        raise UsageError(f"suspect {p} not found")
    return load_model(p)


def _tau_fidelity(ws, flag):
    if flag is not None:
        return float(flag)
    metrics = ws.master / "metrics.json"
    if not metrics.exists():
        raise UsageError("no master metrics; pass --tau-fidelity")
    return json.loads(metrics.read_text())["tau_fidelity"]


def cmd_verify(args, ws, st) -> int:
    keys = _keys(ws, st, args.keyfile, secret=False)
    pk = keys.public if isinstance(keys, crypto.ChameleonKeySet) else keys
    claim_dir = ws.inside(args.claim or "master")
    if not (claim_dir / "passport.bin").exists():
        raise UsageError(f"{claim_dir} is not a bundle directory")
    sig = ws.inside(args.signature) if args.signature else None
    if sig is None and not (claim_dir / "signature.json").exists():
        sig = ws.master / "signature.json"
    claim = load_claim(claim_dir, sig)
    data = _dataset(ws, st)
    tau_e = float(st.get("tau_error", args.tau_error, TAU_ERROR))
    report = verify_ownership(_suspect(ws, args.suspect), claim, pk, data.x_test, data.y_test,
                              _tau_fidelity(ws, st.get("tau_fidelity", args.tau_fidelity)), tau_e)
    out = _write(ws.reports / f"verify-{claim_dir.name}.json", report.to_json())
    payload = {"command": "verify", "report": str(out), **report.to_dict()}
    v = report.verdicts
    _emit(args, payload, f"wrote {out}\n" + " ".join(f"{k}={'pass' if v[k] else 'fail'}" for k in sorted(v))
          + f"\nacc {report.accuracy:.4f} SDA {report.sda:.3f} PHA {report.pha:.3f} licensor "
            f"{report.licensor_text!r} -> {'CONFIRMED' if report.ownership else 'REFUTED'}"
          + ("" if report.reason == "ok" else f" ({report.reason})"))
    if report.reason.startswith("incompatible"):
        return EXIT_INCOMPATIBLE
    return EXIT_OK if report.ownership else EXIT_REFUTED


def cmd_trace(args, ws, st) -> int:
    registry = Registry(ws.users / "registry.jsonl").records()
    if not registry:
        raise UsageError("registry is empty")
    data = _dataset(ws, st)
    passports = [(r["user_id"], load_passport(ws.users / r["user_id"] / "passport.bin")) for r in registry]
    res = trace_traitor(_suspect(ws, args.suspect), passports, data.x_test, data.y_test,
                        _tau_fidelity(ws, st.get("tau_fidelity", args.tau_fidelity)))
    out = _write(ws.reports / "trace.json", canonical_json(res.to_dict()))
    payload = {"command": "trace", "report": str(out), **res.to_dict()}
    if res.ambiguous:
        msg = f"ambiguous: passports of {res.passers} all pass the fidelity test"
    else:
        msg = f"traced to {res.user_id}" if res.user_id else "no registered passport passes"
    _emit(args, payload, f"wrote {out}\n{msg}")
    return EXIT_OK if res.user_id and not res.ambiguous else EXIT_REFUTED


ATTACKS = ("random", "oracle", "flip_sweep", "finetune", "transfer", "prune", "crypto_pha")


def cmd_attack(args, ws, st) -> int:
    if args.name not in ATTACKS:
        raise UsageError(f"unknown attack {args.name!r}; choose from {', '.join(ATTACKS)}")
    params = _parse_params(args.params)
    seed = int(st.get("seed", args.seed, 0))
    target_dir = ws.inside(args.target or "master")
    keys = _keys(ws, st, args.keyfile, secret=False)
    pk = keys.public if isinstance(keys, crypto.ChameleonKeySet) else keys
    data = _dataset(ws, st)
    needs_bundle = args.name != "crypto_pha"
    if needs_bundle:
        if not (target_dir / "model.chpm").exists():
            raise UsageError(f"{target_dir} is not a bundle directory")
        model = load_model(target_dir)
        passport = load_passport(target_dir / "passport.bin")
        cert = load_certificate(target_dir)
        sig_path = target_dir / "signature.json"
        xi = load_signature(sig_path if sig_path.exists() else ws.master / "signature.json")

    def take(name, default, cast=float):
        try:
            return cast(params.pop(name, default))
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {name}") from None

    csv_param = None
    fraction = take("data_fraction", 0.3)
    rates = params.pop("rates", None)
    if rates is not None and (not isinstance(rates, list) or not all(isinstance(r, (int, float)) for r in rates)):
        raise UsageError("rates must be a JSON list of numbers, e.g. rates=[0,0.5,1]")
    if args.name == "random":
        outcomes = [A.random_passport_attack(model, data.x_test, data.y_test, take("trials", 100, int), seed)]
        _write(ws.attacks / "random_hist.txt", A.histogram_text([t["accuracy"] for t in outcomes[0].trials]))
    elif args.name == "oracle":
        cfg = A.OracleConfig(iterations=take("iterations", 300, int), lr=take("lr", 0.01), seed=seed)
        outcomes = [A.oracle_ambiguity_attack(model, passport, cert, xi, data, pk, fraction,
                                              take("flip_rate", 0.0), cfg)]
    elif args.name == "flip_sweep":
        cfg = A.OracleConfig(iterations=take("iterations", 300, int), lr=take("lr", 0.01), seed=seed)
        outcomes = A.flip_sweep(model, passport, cert, xi, data, pk, rates, cfg=cfg, data_fraction=fraction,
                                restarts=take("restarts", 3, int))
        csv_param = "flip_rate"
    elif args.name in ("finetune", "transfer"):
        cfg = A.FinetuneConfig(epochs=take("epochs", 50, int), lr=take("lr", 1e-3), seed=seed)
        new = pattern_blobs(seed=seed + 100) if args.name == "transfer" else None
        outcomes = [A.finetune_attack(model, passport, xi, data, fraction, cfg,
                                      "transfer" if new is not None else "rtal", new)]
    elif args.name == "prune":
        strategy = take("strategy", "l1", str)
        if strategy not in ("l1", "random"):
            raise UsageError("strategy must be l1 or random")
        outcomes = A.prune_attack(model, passport, xi, data.x_test, data.y_test, strategy, rates, seed)
        csv_param = "prune_rate"
    else:
        cert = load_certificate(target_dir) if (target_dir / "certificate.json").exists() else crypto.Certificate(1)
        outcomes = [A.crypto_only_pha(pk, cert, take("C", 512, int), take("trials", 20, int), seed)]
    if params:
        raise UsageError(f"unused parameters for {args.name}: {sorted(params)}")
    files = [str(A.write_jsonl(outcomes, ws.attacks / f"{args.name}.jsonl"))]
    if csv_param:
        files.append(str(A.write_sweep_csv(outcomes, csv_param, ws.attacks / f"{args.name}.csv")))
    rows = [{"params": A.outcome_record(o)["params"], "accuracy": o.accuracy, "sda": o.sda, "pha": o.pha}
            for o in outcomes]
    payload = {"command": "attack", "name": args.name, "files": files, "outcomes": rows}
    _emit(args, payload, "\n".join(f"wrote {f}" for f in files) + "\n" + "\n".join(
        f"{r['params']} acc {r['accuracy']:.4f}" + (f" SDA {r['sda']:.3f}" if r["sda"] is not None else "")
        + (f" PHA {r['pha']:.3f}" if r["pha"] is not None else "") for r in rows))
    return EXIT_OK


def cmd_serve(args, ws, st) -> int:
    import uvicorn

    from .service import admin_token, create_app, parse_bind, service_from_env

    env = {"CHIP_KEYFILE": str(ws.inside(st.get("keyfile", args.keyfile, "keys/owner.json"))),
           "CHIP_MODEL": str(ws.inside(st.get("model", args.model, "master"))),
           "CHIP_REGISTRY": str(ws.inside(st.get("registry", args.registry, "keys/tokens.json")))}
    service = service_from_env(env, per_request=bool(st.get("per_request", args.per_request or None, False)),
                               ttl=float(st.get("session_ttl", args.ttl, 900)))
    host, port = parse_bind(st.get("bind_addr", args.bind))
    if isinstance(service.keys, crypto.ChameleonKeySet):
        print(f"admin token: {admin_token(service.keys)}", file=sys.stderr)
    uvicorn.run(create_app(service), host=host, port=port, log_level="info")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workspace", help="workspace root (default: CHIP_WORKSPACE or .)")
    common.add_argument("--config", help="flat key = value config file (default: <workspace>/chip.toml)")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--keyfile", help="owner key file (default keys/owner.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="chip", description="Chameleon-hash passport watermarking toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    k = sub.add_parser("keygen", parents=[common], help="generate chameleon-hash keys")
    k.add_argument("--profile", choices=("toy", "standard"))
    k.add_argument("--seed", help="hex seed for reproducible keys")
    k.add_argument("--bits", type=int, help="bit length of q for the standard profile (>= 256)")
    k.add_argument("--out", help="key file (default keys/owner.json)")

    w = sub.add_parser("watermark", parents=[common], help="train the watermarked master model")
    w.add_argument("--seed", type=int)
    w.add_argument("--epochs", type=int)
    w.add_argument("--lr", type=float)
    w.add_argument("--licensor-text", dest="licensor_text")

    f = sub.add_parser("forge", parents=[common], help="mint licensee triplets")
    f.add_argument("--seed", type=int)
    f.add_argument("--users", type=int)
    f.add_argument("--user-id", dest="user_id")
    f.add_argument("--iterations", type=int)

    v = sub.add_parser("verify", parents=[common], help="run the four-test ownership verification")
    v.add_argument("--seed", type=int, help="unused; accepted for uniform scripting")
    v.add_argument("--suspect", required=True, help="suspect checkpoint (arch.json beside it) or bundle dir")
    v.add_argument("--claim", help="claim bundle directory (default master/)")
    v.add_argument("--signature", help="signature.json to claim (default: the claim's, else master's)")
    v.add_argument("--tau-fidelity", dest="tau_fidelity", type=float)
    v.add_argument("--tau-error", dest="tau_error", type=float)

    t = sub.add_parser("trace", parents=[common], help="find which licensee's passport drives a suspect")
    t.add_argument("--seed", type=int, help="unused; accepted for uniform scripting")
    t.add_argument("--suspect", required=True)
    t.add_argument("--tau-fidelity", dest="tau_fidelity", type=float)

    a = sub.add_parser("attack", parents=[common], help="run an ambiguity or removal attack")
    a.add_argument("--seed", type=int)
    a.add_argument("--name", required=True, help=", ".join(ATTACKS))
    a.add_argument("--target", help="bundle directory to attack (default master/)")
    a.add_argument("--params", action="append", help="key=value[,key=value]")

    s = sub.add_parser("serve", parents=[common], help="run the token-authenticated inference service")
    s.add_argument("--seed", type=int, help="unused; accepted for uniform scripting")
    s.add_argument("--bind", help="host:port (default CHIP_BIND_ADDR or 127.0.0.1:8000)")
    s.add_argument("--model", help="master bundle directory")
    s.add_argument("--registry", help="token registry file")
    s.add_argument("--per-request", dest="per_request", action="store_true",
                   help="authenticate every predict call; no sessions")
    s.add_argument("--ttl", type=float, help="session lifetime in seconds")
    return p


COMMANDS = {"keygen": cmd_keygen, "watermark": cmd_watermark, "forge": cmd_forge, "verify": cmd_verify,
            "trace": cmd_trace, "attack": cmd_attack, "serve": cmd_serve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = Workspace(args.workspace or os.environ.get("CHIP_WORKSPACE") or ".")
    try:
        st = Settings(read_config(args.config or ws.root / "chip.toml"))
        return COMMANDS[args.command](args, ws, st)
    except UsageError as exc:
        print(f"chip {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleModel as exc:
        print(f"chip {args.command}: incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
