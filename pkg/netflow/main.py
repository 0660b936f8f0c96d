import argparse
import json
import logging
import sys
import uuid
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

# Import configuration settings
from netflow.config import COMMANDS, LOG_LEVEL, NETFLOW_OUTPUT, RunConfig, parse_config
from netflow.errors import NetflowError
from netflow.helper import extract_metadata, validate_file
from netflow.workflows import WORKFLOWS

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger("netflow")
logging.getLogger("meshio").setLevel(logging.WARNING)

UNEXPECTED_EXIT = 3


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_manifest(out: Path, manifest: dict) -> Path:
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def dispatch(cfg: RunConfig, operation_id: str | None = None) -> tuple[int, Path]:
    """Run one command and write its manifest, also when the run fails.

    Returns the exit status and the manifest path.
    """
    operation_id = operation_id or str(uuid.uuid4())
    out = Path(cfg.output) / cfg.command
    out.mkdir(parents=True, exist_ok=True)
    logger.info(
        "Starting run",
        extra={"command": cfg.command, "output": str(out), "operation_id": operation_id},
    )
    artifacts, summary, error = [], {}, None
    try:
        summary = WORKFLOWS[cfg.command](cfg, out, artifacts)
        status, code = "ok", 0
    except NetflowError as e:
        logger.exception(
            "Run failed",
            extra={"command": cfg.command, "operation_id": operation_id},
        )
        status, code, error = "failed", e.exit_code, str(e)
    except Exception as e:
        logger.exception(
            "Unexpected error during run",
            extra={"command": cfg.command, "operation_id": operation_id},
        )
        status, code, error = "failed", UNEXPECTED_EXIT, f"Unexpected error: {str(e)}"

    entries = []
    for path in artifacts:
        is_valid, message = validate_file(path)
        if not is_valid:
            logger.warning(
                "Artifact failed validation",
                extra={"file_name": str(path), "reason": message, "operation_id": operation_id},
            )
            continue
        entries.append(extract_metadata(path))

    manifest = {
        "command": cfg.command,
        "operation_id": operation_id,
        "status": status,
        "exit_code": code,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": cfg.as_dict(),
        "artifacts": entries,
        "summary": summary,
    }
    if error is not None:
        manifest["error"] = error
    path = write_manifest(out, manifest)
    logger.info(
        "Run finished",
        extra={"command": cfg.command, "status": status, "operation_id": operation_id},
    )
    return code, path


def write_rejected_manifest(config_path, overrides: list[str], error: NetflowError) -> Path | None:
    """Manifest for a run whose configuration never parsed.

    Goes to `<output>/<command>/` as far as the file and overrides name them,
    with `invalid` standing in for a missing or unknown command.
    """
    settings = {}
    if config_path is not None and Path(config_path).is_file():
        settings.update(dotenv_values(config_path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if sep:
            settings[key.strip()] = value.strip()
    command = settings.get("command") or ""
    out = Path(settings.get("output") or NETFLOW_OUTPUT) / (command if command in COMMANDS else "invalid")
    manifest = {
        "command": command or None,
        "operation_id": str(uuid.uuid4()),
        "status": "failed",
        "exit_code": error.exit_code,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": {"file": config_path, "overrides": overrides},
        "artifacts": [],
        "summary": {},
        "error": str(error),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        return write_manifest(out, manifest)
    except OSError as e:
        logger.warning("Could not write manifest", extra={"output": str(out), "reason": str(e)})
        return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netflow",
        description="Network formation models: discrete adaptation, tensor flow and steady states.",
    )
    parser.add_argument("--config", type=Path, help="key=value configuration file")
    parser.add_argument(
        "arguments",
        nargs="*",
        metavar="[command] key=value",
        help=f"optional command ({', '.join(COMMANDS)}) followed by configuration overrides",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.arguments)
    command = None
    if overrides and "=" not in overrides[0]:
        command = overrides.pop(0)
        overrides.append(f"command={command}")
    try:
        cfg = parse_config(args.config, overrides)
    except NetflowError as e:
        if command is None and args.config is None:
            parser.print_usage(sys.stderr)
        print(f"netflow: error: {e}", file=sys.stderr)
        logger.error("Invalid configuration", extra={"reason": str(e)})
        write_rejected_manifest(args.config, overrides, e)
        return e.exit_code
    code, manifest = dispatch(cfg)
    print(manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
