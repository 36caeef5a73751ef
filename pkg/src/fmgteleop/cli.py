"""Command-line entry point: ``fmgteleop <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 runtime failure.
Settings can also come from a flat ``key = value`` file given with ``--config``;
flags win over file values. Keys are either top-level (``seed``, ``data``,
``out`` ...) or prefixed with ``train.``, ``gen.`` or ``hand.``.
"""

import argparse
import math
import socket
import sys
import threading
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, check_keys, load_kv
from .models import ARCHS, CheckpointError, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .protocol import StreamDecoder, decode_stream, encode_frame
from .retarget import RobotHandConfig, hand_config_from_mapping
from .signal import SessionFormatError, SessionRecording, load_session, load_sessions
from .stats import anova_oneway, tukey_hsd, tukey_table
from .synth import GeneratorConfig, config_from_mapping, config_to_text, write_sessions
from .training import (TrainConfig, TrainingDivergedError, evaluate, finetune, format_grid, format_table,
                       history_csv, permutation_importance, report_csv, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

TOP_KEYS = ("seed", "data", "test", "out", "model", "ckpt", "sessions", "repeats", "fraction", "hand",
            "listen", "connect", "session", "realtime", "epochs", "stride", "budgets", "train_frames", "models")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
GEN_KEYS = tuple(f.name for f in fields(GeneratorConfig))
HAND_KEYS = ("n_fingers", "max_speed", "lower", "upper", "abduction")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- run configuration ----------------------------------------------------------

class RunConfig:
    """File values overlaid by explicit flags, split into the four key groups."""

    def __init__(self, args):
        raw = load_kv(args.config) if getattr(args, "config", None) else {}
        self.top, self.train, self.gen, self.hand = {}, {}, {}, {}
        groups = {"train": (self.train, TRAIN_KEYS), "gen": (self.gen, GEN_KEYS), "hand": (self.hand, HAND_KEYS)}
        for key, value in raw.items():
            prefix, _, rest = key.partition(".")
            if rest and prefix in groups:
                target, allowed = groups[prefix]
                check_keys({rest: value}, allowed, f"{prefix}.")
                target[rest] = value
            else:
                check_keys({key: value}, TOP_KEYS)
                self.top[key] = value
        for key, value in vars(args).items():
            if key in TOP_KEYS and value is not None:
                self.top[key] = value

    def get(self, key, default=None, cast=str):
        value = self.top.get(key)
        if value is None:
            return default
        try:
            return cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc

    def require(self, key, cast=str):
        value = self.get(key, cast=cast)
        if value is None:
            raise UsageError(f"missing required setting --{key.replace('_', '-')}")
        return value

    def train_config(self, **overrides):
        kw = {}
        for key, value in self.train.items():
            f = next(f for f in fields(TrainConfig) if f.name == key)
            kw[key] = int(value) if f.type in (int, "int") else float(value)
        if "seed" in self.top:
            kw["seed"] = int(self.top["seed"])
        if "epochs" in self.top:
            kw["max_epochs"] = int(self.top["epochs"])
        if "stride" in self.top:
            kw["stride"] = int(self.top["stride"])
        kw.update(overrides)
        return TrainConfig(**kw)

    def hand_config(self):
        if "hand" in self.top:
            values = load_kv(self.top["hand"])
            values.update(self.hand)
            return hand_config_from_mapping(values)
        return hand_config_from_mapping(self.hand) if self.hand else RobotHandConfig()


def _sessions(path):
    path = Path(path)
    if path.is_file():
        return [load_session(path)]
    if not path.is_dir():
        raise DataError(f"no such data directory: {path}")
    sessions = load_sessions(path)
    if not sessions:
        raise DataError(f"no session CSV files in {path}")
    return sessions


def _split_test(rc):
    sessions = _sessions(rc.require("data"))
    if "test" in rc.top:
        return sessions, _sessions(rc.top["test"])
    if len(sessions) < 2:
        raise DataError("need at least two sessions to hold some out for testing (or pass --test)")
    n_test = max(1, math.ceil(0.2 * len(sessions)))
    return sessions[:-n_test], sessions[-n_test:]


def _out_path(rc, key="out"):
    out = Path(rc.require(key))
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------------

def cmd_synth(rc):
    gen = dict(rc.gen)
    if "seed" in rc.top:
        gen["seed"] = rc.top["seed"]
    if "sessions" in rc.top:
        gen["n_sessions"] = rc.top["sessions"]
    config = config_from_mapping(gen)
    out = Path(rc.require("out"))
    paths = write_sessions(config, out)
    (out / "generator.cfg").write_text(
        "".join(f"gen.{line}\n" for line in config_to_text(config).splitlines()), encoding="utf-8")
    _log(f"wrote {len(paths)} sessions to {out}")


def cmd_train(rc):
    arch = rc.require("model")
    if arch not in ARCHS:
        raise UsageError(f"unknown model {arch!r}; choose from {', '.join(ARCHS)}")
    sessions = _sessions(rc.require("data"))
    config = rc.train_config()
    model = build_model(ModelSpec(arch, H=config.H, seed=config.seed))
    model, history = train(model, sessions, config, log=_log)
    out = _out_path(rc)
    save_checkpoint(model, out)
    out.with_suffix(".history.csv").write_text(history_csv(history), encoding="utf-8")
    _log(f"saved {arch} checkpoint to {out} (best val MAE {min(r.val_mae for r in history):.3f} deg)")


def cmd_eval(rc):
    model = load_checkpoint(rc.require("ckpt"))
    report = evaluate(model, _sessions(rc.require("data")))
    name = model.spec.arch
    print(format_table({name: report}))
    print(format_grid(report))
    if "out" in rc.top:
        _out_path(rc).write_text(report_csv({name: report}), encoding="utf-8")


def cmd_bench(rc):
    train_s, test_s = _split_test(rc)
    models = rc.get("models", "tcn,fcnn,fcnn5,cnn,lstm").split(",")
    for m in models:
        if m not in ARCHS:
            raise UsageError(f"unknown model {m!r}")
    config = rc.train_config()
    out = Path(rc.require("out"))
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for arch in sorted(models):
        _log(f"training {arch}")
        model, history = train(build_model(ModelSpec(arch, seed=config.seed)), train_s, config, log=_log)
        save_checkpoint(model, out / f"{arch}.ckpt")
        (out / f"{arch}.history.csv").write_text(history_csv(history), encoding="utf-8")
        reports[arch] = evaluate(model, test_s)
    table = format_table(reports)
    print(table)
    (out / "report.csv").write_text(report_csv(reports), encoding="utf-8")
    lines = [table, ""]
    if len(reports) >= 2:
        groups = [r.errors.ravel() for r in reports.values()]
        F, p = anova_oneway(groups)
        lines += [f"one-way ANOVA: F = {F:.4f}, p = {p:.4g}", "", tukey_table(tukey_hsd(groups), list(reports))]
    (out / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_importance(rc):
    model = load_checkpoint(rc.require("ckpt"))
    scores = permutation_importance(model, _sessions(rc.require("data")), repeats=rc.get("repeats", 3, int),
                                    seed=rc.get("seed", 0, int), stride=rc.get("stride", 1, int))
    out = _out_path(rc)
    out.write_text("sensor,importance_pct\n" + "".join(f"{i + 1},{s:.6f}\n" for i, s in enumerate(scores)),
                   encoding="utf-8")


def truncate_active(sessions, n_frames):
    """Baseline rows plus the first ``n_frames`` active rows, taken across sessions in order."""
    out = []
    for s in sessions:
        if n_frames <= 0:
            break
        active = np.flatnonzero(~s.is_baseline)
        keep = np.concatenate([np.flatnonzero(s.is_baseline), active[:n_frames]])
        n_frames -= min(len(active), n_frames)
        out.append(SessionRecording(s.session_id, s.timestamps_us[keep], s.raw[keep], s.poses[keep],
                                    s.is_baseline[keep], dict(s.meta)))
    return out


def cmd_finetune(rc):
    model = load_checkpoint(rc.require("ckpt"))
    new = _sessions(rc.require("data"))
    fraction = rc.require("fraction", float)
    if not 0 <= fraction <= 1:
        raise DataError("--fraction must lie in [0, 1]")
    train_frames = rc.get("train_frames", 36000, int)
    seed = rc.get("seed", 0, int)
    tuned = finetune(model, truncate_active(new, round(fraction * train_frames)), seed=seed)
    save_checkpoint(tuned, _out_path(rc))
    if "test" in rc.top:
        test = _sessions(rc.top["test"])
        budgets = sorted({fraction, *(float(b) for b in rc.get("budgets", "0.01,0.02,0.05").split(","))})
        base = evaluate(model, test).mean
        rows = ["fraction,new_frames,mae_deg"] + [f"0,0,{base:.6f}"]
        for b in budgets:
            n = round(b * train_frames)
            m = tuned if b == fraction else finetune(model, truncate_active(new, n), seed=seed)
            rows.append(f"{b},{n},{evaluate(m, test).mean:.6f}")
        curve = Path(rc.require("out")).with_suffix(".budget.csv")
        curve.write_text("\n".join(rows) + "\n", encoding="utf-8")


def _address(text):
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise UsageError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(rc):
    from .pipeline import Pipeline

    model = load_checkpoint(rc.require("ckpt"))
    pipe = Pipeline(model, rc.hand_config())
    host, port = _address(rc.require("listen"))
    record = open(rc.top["out"], "wb") if "out" in rc.top else None
    with socket.create_server((host, port)) as srv:
        _log(f"listening on {host}:{srv.getsockname()[1]}")
        conn, _ = srv.accept()
        with conn:
            def sink(frame):
                data = encode_frame(frame)
                if record:
                    record.write(data)
                try:
                    conn.sendall(data)
                except OSError:
                    pass

            decoder = StreamDecoder()

            def source():
                while True:
                    chunk = conn.recv(65536)
                    if not chunk:
                        yield from decoder.finish()
                        return
                    yield from decoder.feed(chunk)

            _, stats = pipe.run_threaded(source(), sink)
            try:
                conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass
    if record:
        record.close()
    sys.stderr.write(stats.to_text())


def cmd_replay(rc):
    from .pipeline import replay_source

    host, port = _address(rc.require("connect"))
    realtime = rc.get("realtime", False, lambda v: v is True or str(v).lower() in ("1", "true", "yes"))
    frames = replay_source(rc.require("session"), realtime=realtime)
    received = bytearray()
    with socket.create_connection((host, port)) as conn:
        def reader():
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    return
                received.extend(chunk)

        th = threading.Thread(target=reader, daemon=True)
        th.start()
        for frame in frames:
            conn.sendall(encode_frame(frame))
        conn.shutdown(socket.SHUT_WR)
        th.join()
    if "out" in rc.top:
        _out_path(rc).write_bytes(bytes(received))
    n = sum(1 for f in decode_stream(bytes(received)) if not isinstance(f, Exception))
    _log(f"received {n} frames")


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="fmgteleop", description="Forearm-sensor finger pose estimation and teleoperation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text, *flags):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--seed", type=int)
        for flag in flags:
            kw = {"action": "store_const", "const": True} if flag == "realtime" else {}
            sp.add_argument(f"--{flag.replace('_', '-')}", dest=flag, **kw)
        return sp

    add("synth", "write synthetic session CSVs", "out", "sessions")
    add("train", "train one model", "model", "data", "out", "epochs", "stride")
    add("eval", "per-joint errors of a checkpoint", "ckpt", "data", "out")
    add("bench", "train and compare several models", "data", "test", "out", "models", "epochs", "stride")
    add("importance", "permutation importance per sensor", "ckpt", "data", "repeats", "out", "stride")
    add("finetune", "adapt a checkpoint to new data", "ckpt", "data", "fraction", "out", "test", "budgets",
        "train_frames")
    add("serve", "run the teleoperation loop on a TCP stream", "ckpt", "hand", "listen", "out")
    add("replay", "stream a session file to a server", "session", "connect", "realtime", "out")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "importance": cmd_importance, "finetune": cmd_finetune, "serve": cmd_serve, "replay": cmd_replay}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        rc = RunConfig(args)
        COMMANDS[args.command](rc)
        return EXIT_OK
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (DataError, ConfigError, SessionFormatError, CheckpointError, FileNotFoundError, KeyError,
            ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except (TrainingDivergedError, OSError, RuntimeError) as exc:
        _log(f"runtime failure: {exc}")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        _log(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
