"""File formats: TOML configs (devices, topology, policy, scenario, scales),
composition JSON, and access to the bundled demo data."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from scentline.chain import ChainTopology
from scentline.device import DeviceConfig
from scentline.score import OdorComposition, OdorantSpec, SafetyPolicy
from scentline.sequencer import ScenarioScript
from scentline.survey import ScaleDef

_DEVICE_KEYS = {
    "address",
    "pump_max_flow",
    "tube_volume",
    "tau_rise",
    "tau_fall",
    "battery_capacity",
    "idle_current",
    "active_current",
    "noise_coeff",
    "audibility_threshold",
    "sim_step",
    "residual_floor",
    "purge",
    "calibration",
    "snapshot_every",
    "odorant",
}


class ConfigError(ValueError):
    pass


def _read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")


def device_config_from_table(table: dict) -> DeviceConfig:
    unknown = set(table) - _DEVICE_KEYS
    if unknown:
        raise ConfigError(f"unknown device config keys: {sorted(unknown)}")
    kwargs = {k: v for k, v in table.items() if k not in ("address", "odorant", "calibration")}
    if "odorant" in table:
        od = table["odorant"]
        kwargs["loaded_odorant"] = OdorantSpec(
            name=od["name"],
            constituents=tuple(od.get("constituents", ())),
            detection_threshold_span=float(od.get("detection_threshold_span", 0.0)),
        )
    if "calibration" in table:
        kwargs["calibration"] = tuple(
            (float(s), float(c)) for s, c in table["calibration"]
        )
    try:
        return DeviceConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad device config: {exc}")


def load_topology(path: str | Path) -> ChainTopology:
    """Chain TOML: top-level ``hop_latency`` plus one [[device]] table each."""
    data = _read_toml(path)
    devices = []
    for table in data.get("device", []):
        if "address" not in table:
            raise ConfigError("every [[device]] table needs an address")
        devices.append((int(table["address"]), device_config_from_table(table)))
    try:
        return ChainTopology(
            devices=tuple(devices),
            hop_latency=float(data.get("hop_latency", 0.001)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad topology: {exc}")


def load_policy(path: str | Path) -> SafetyPolicy:
    data = _read_toml(path)
    try:
        return SafetyPolicy(
            approved_odorants=frozenset(data["approved_odorants"]),
            max_concentration=float(data.get("max_concentration", 1.0)),
            max_single_exposure=float(data.get("max_single_exposure", 60.0)),
            min_inter_stimulus=float(data.get("min_inter_stimulus", 10.0)),
            max_cumulative_exposure=float(data.get("max_cumulative_exposure", 300.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"policy missing key {exc}")
    except ValueError as exc:
        raise ConfigError(f"bad policy: {exc}")


def load_scenario(path: str | Path) -> tuple[ScenarioScript, str | None]:
    """Scenario TOML; returns the script plus an optional composition path,
    resolved relative to the scenario file."""
    data = _read_toml(path)
    try:
        script = ScenarioScript(
            name=str(data.get("name", Path(path).stem)),
            duration=float(data["duration"]),
            cues=tuple((float(c["t"]), str(c["label"])) for c in data.get("cues", [])),
            markers=tuple(
                (float(m["t"]), str(m["label"])) for m in data.get("markers", [])
            ),
        )
    except KeyError as exc:
        raise ConfigError(f"scenario missing key {exc}")
    except ValueError as exc:
        raise ConfigError(f"bad scenario: {exc}")
    composition = data.get("composition")
    if composition is not None:
        resolved = Path(path).parent / composition
        composition = str(resolved) if resolved.exists() else str(composition)
    return script, composition


def load_composition(path: str | Path) -> OdorComposition:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"composition file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid composition JSON in {path}: {exc}")
    try:
        return OdorComposition.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad composition: {exc}")


def save_composition(comp: OdorComposition, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(comp.to_dict(), fh, indent=2)
        fh.write("\n")


def load_scaledef(path: str | Path) -> tuple[ScaleDef, float, float]:
    """Scale TOML; returns (definition, scale_min, scale_max)."""
    data = _read_toml(path)
    try:
        scale = ScaleDef(
            name=str(data["name"]),
            items=tuple(data["items"]),
            reverse_coded=frozenset(data.get("reverse", [])),
            factors={
                name: tuple(members)
                for name, members in data.get("factors", {}).items()
            },
        )
    except KeyError as exc:
        raise ConfigError(f"scaledef missing key {exc}")
    except ValueError as exc:
        raise ConfigError(f"bad scaledef: {exc}")
    return scale, float(data.get("scale_min", 1)), float(data.get("scale_max", 7))


def bundled_path(name: str) -> Path:
    """Path to a file shipped in scentline/data."""
    path = resources.files("scentline") / "data" / name
    return Path(str(path))


BUNDLED_TOPOLOGY = "topology_demo.toml"
BUNDLED_POLICY = "policy_default.toml"
BUNDLED_SCENARIO = "scenario_study.toml"
BUNDLED_COMPOSITION = "composition_demo.json"
BUNDLED_SMF = "demo.mid"
BUNDLED_SCALEDEF = "scaledef_identical.toml"
BUNDLED_RESPONSES = "responses_identical.csv"
