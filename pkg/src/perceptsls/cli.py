"""Pipeline command line: generate-data, train-perception, estimate-safety,
synthesize, simulate, profile, necessity, report.

Every subcommand reads one JSON config (embedded defaults when omitted), writes
its artifacts plus an updated manifest.json under --out, and exits 0 on
success, 2 on infeasible synthesis, 1 on any error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_config
from .lti import (
    FirController,
    LtiSystem,
    StateSpaceController,
    double_integrator,
    lqr_gain,
    lqg_controller,
)
from .perception import (
    CircleSceneConfig,
    apply_map_batch,
    fit_linear_map,
    generate_dataset,
    load_dataset,
    map_from_dict,
    map_to_dict,
    save_dataset,
    scene_from_dict,
)
from .report import RunManifest, svg_line_plot, write_csv, write_json
from .experiments import (
    ControllerEntry,
    ExperimentConfig,
    NecessityReport,
    ReferenceConfig,
    TrackingWorld,
    lqr_tracking_trajectory,
    necessity_demo,
    perception_error_profile,
    run_tracking_experiment,
)
from .safety import (
    SafeSetParams,
    estimate_slopes_dataset,
    nearest_training_distance,
    training_error,
)
from .synthesis import (
    SynthesisSpec,
    realize_controller,
    synthesize_h2_robust,
    synthesize_l1,
    tracking_error_system,
)

STAGES = (
    "generate-data",
    "train-perception",
    "estimate-safety",
    "synthesize",
    "simulate",
    "profile",
    "necessity",
    "report",
)

REQUIRES: dict[str, list[str]] = {
    "generate-data": [],
    "train-perception": ["dataset/meta.json"],
    "estimate-safety": ["dataset/meta.json", "perception_map.json"],
    "synthesize": ["safety_params.json"],
    "simulate": ["dataset/meta.json", "perception_map.json", "safety_params.json"],
    "profile": ["dataset/meta.json", "perception_map.json", "safety_params.json"],
    "necessity": [],
    "report": [],
}


class StageError(RuntimeError):
    exit_code = 1


class InfeasibleError(StageError):
    exit_code = 2


def _scene(cfg) -> CircleSceneConfig:
    s = cfg["scene"]
    return CircleSceneConfig(
        width=s["width"],
        height=s["height"],
        world_window=tuple(s["world_window"]),
        radius=s["radius"],
        blur_sigma=s["blur_sigma"],
    )


def _reference(cfg) -> ReferenceConfig:
    r = cfg["reference"]
    return ReferenceConfig(center=tuple(r["center"]), radius=r["radius"], period=r["period"], phase=r["phase"])


def _base_system(cfg) -> LtiSystem:
    return double_integrator(cfg["system"]["dt"], axes=cfg["system"]["axes"])


def _check_inputs(stage: str, out: Path, extra: list[str] = ()):  # type: ignore[assignment]
    for rel in list(REQUIRES[stage]) + list(extra):
        if not (out / rel).exists():
            raise StageError(
                f"missing required artifact {out / rel}; run the upstream stage that produces it first"
            )


def _load_json(path: Path):
    import json

    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# stages


def stage_generate_data(cfg, out: Path) -> list[Path]:
    scene = _scene(cfg)
    ref = _reference(cfg)
    base = _base_system(cfg)
    esys = tracking_error_system(base)
    tr = cfg["training"]
    K = lqr_gain(base.A, base.B, np.diag(tr["lqr_q"] * cfg["system"]["axes"]), np.diag(tr["lqr_r"] * cfg["system"]["axes"]))
    states = []
    master = cfg["seed"]
    for i in range(tr["trajectories"]):
        rng = np.random.default_rng(np.random.SeedSequence([master, 1, i]))
        offset = tr["radial_offsets"][i % len(tr["radial_offsets"])]
        phase = 2.0 * np.pi * i / tr["trajectories"]
        orbit = ReferenceConfig(center=ref.center, radius=ref.radius + offset, period=ref.period, phase=phase)
        waypoints = orbit.positions(tr["steps"] + 1)
        if tr["v_bound"] > 0:
            waypoints = waypoints + rng.uniform(-tr["v_bound"], tr["v_bound"], size=waypoints.shape)
        states.append(lqr_tracking_trajectory(esys, K, waypoints, tr["steps"]))
    all_states = np.vstack(states)
    ds = generate_dataset(all_states, scene, C=base.C, seed=master, description="lqr tracking rollouts around offset orbits")
    save_dataset(ds, out / "dataset")
    produced = sorted((out / "dataset").glob("*"))
    return produced


def stage_train_perception(cfg, out: Path) -> list[Path]:
    ds = load_dataset(out / "dataset")
    scene = _scene(cfg)
    ridge = cfg["perception"]["ridge_scale"] * scene.width * scene.height
    pmap = fit_linear_map(ds, ridge)
    train_r0 = training_error(ds, pmap)
    payload = map_to_dict(pmap)
    payload["training_error"] = train_r0
    return [write_json(out / "perception_map.json", payload)]


def stage_estimate_safety(cfg, out: Path) -> list[Path]:
    ds = load_dataset(out / "dataset")
    pmap = map_from_dict(_load_json(out / "perception_map.json"))
    scene = _scene(cfg)
    sc = cfg["safety"]
    R0 = training_error(ds, pmap)
    est = estimate_slopes_dataset(
        pmap, scene, ds, r=sc["r"], epsilon=sc["epsilon"], tau=sc["tau"], L=sc["L"],
        subsample=sc["slope_subsample"],
    )
    S = est.corrected
    ref = _reference(cfg)
    orbit = ref.positions(ref.period)
    d, _ = nearest_training_distance(ds, orbit)
    r_ref = float(np.max(d)) + cfg["experiments"]["v_bound"] + sc["r_ref_margin"]
    params = SafeSetParams(
        r=sc["r"], S=S, R0=R0, gamma=R0 + S * sc["r"],  # provisional budget; synthesis refines it
        epsilon=sc["epsilon"], tau=sc["tau"], L=sc["L"],
    )
    payload = params.to_dict()
    payload["r_ref"] = r_ref
    payload["s_hat"] = est.s_hat
    payload["slope_points"] = len(est.per_point)
    payload["slope_attained_distance_max"] = max(est.attained_distance.values())
    files = [write_json(out / "safety_params.json", payload)]
    files.append(write_json(out / "slope_estimate.json", est.to_dict()))
    return files


def _controller_specs(cfg, safety: dict):
    """SynthesisSpec per controller name, from the config plus measured safety params."""
    axes = cfg["system"]["axes"]
    syn = cfg["synthesis"]
    Q = np.array([1.0 / syn["q_pos"] ** 2, 1.0 / syn["q_vel"] ** 2] * axes)
    R = np.array([1.0 / syn["r_act"] ** 2] * axes)
    sel_rows = tuple(range(0, 2 * axes, 2))  # position coordinates
    eps_w = syn["eps_w"] if syn["eps_w"] is not None else syn["delta_ref"]
    eps_e = syn["eps_e"] if syn["eps_e"] is not None else safety["R0"]
    alpha = syn["alpha"] if syn["alpha"] is not None else cfg["synthesis"]["h2_alpha_factor"] / safety["S"]
    T = syn["T"]
    return {
        "nominal-l1": SynthesisSpec(T=T, Q=Q, R=R, mode="nominal_l1", eps_w=eps_w, eps_e=eps_e),
        "robust-l1": SynthesisSpec(
            T=T, Q=Q, R=R, mode="robust_l1",
            delta_ref=syn["delta_ref"], r_ref=safety["r_ref"], r=safety["r"],
            S=safety["S"], R0=safety["R0"], sel_rows=sel_rows,
        ),
        "robust-h2": SynthesisSpec(T=T, Q=Q, R=R, mode="robust_h2", alpha=alpha, sel_rows=sel_rows),
    }


def stage_synthesize(cfg, out: Path, only: str | None = None) -> list[Path]:
    safety = _load_json(out / "safety_params.json")
    base = _base_system(cfg)
    esys = tracking_error_system(base)
    controllers = cfg["experiments"]["controllers"] if only is None else [only]
    T_K = max(cfg["synthesis"]["T"], cfg["experiments"]["horizon"])
    files = []
    summary = []
    cdir = out / "controllers"
    for name in controllers:
        if name == "lqg":
            w_scale = cfg["experiments"]["lqg_w_scale"]
            v_scale = cfg["experiments"]["lqg_v_scale"]
            if v_scale is None:
                v_scale = max(safety["R0"] ** 2, 1e-8)
            ctrl = lqg_controller(esys, np.eye(esys.nx), np.eye(esys.nu),
                                  w_scale * np.eye(esys.nx), v_scale * np.eye(esys.ny))
            payload = {
                "name": name,
                "mode": "lqg",
                "status": "optimal",
                "controller": {
                    "type": "ss",
                    "Ak": ctrl.Ak.tolist(),
                    "Bk": ctrl.Bk.tolist(),
                    "Ck": ctrl.Ck.tolist(),
                },
                "weights": {"w_scale": w_scale, "v_scale": v_scale},
            }
            files.append(write_json(cdir / "lqg.json", payload))
            summary.append(f"lqg: certainty-equivalent predictor, W={w_scale} I, V={v_scale:.3g} I")
            continue
        spec = _controller_specs(cfg, safety)[name]
        if spec.mode == "robust_h2":
            res = synthesize_h2_robust(esys, spec)
        else:
            res = synthesize_l1(esys, spec)
        if res.status == "infeasible":
            detail = res.margins.get("detail", res.margins.get("violated", ""))
            raise InfeasibleError(f"{name}: synthesis infeasible ({res.margins.get('violated', 'constraints')}): {detail}")
        K = realize_controller(res.quartet, T_K)
        payload = {
            "name": name,
            "mode": spec.mode,
            "status": res.status,
            "cost": res.cost,
            "gamma": res.gamma,
            "margins": _jsonable(res.margins),
            "spec": {
                "T": spec.T, "Q": spec.Q.tolist(), "R": spec.R.tolist(),
                "eps_w": spec.eps_w, "eps_e": spec.eps_e, "delta_ref": spec.delta_ref,
                "r_ref": spec.r_ref, "r": spec.r, "S": spec.S, "R0": spec.R0,
                "alpha": spec.alpha, "sel_rows": list(spec.sel_rows) if spec.sel_rows else None,
            },
            "controller": {
                "type": "fir",
                "taps": K.taps.tolist(),
                "truncation_diagnostic": K.truncation_diagnostic,
            },
            "quartet": {
                "T": res.quartet.T,
                "phi_xw": res.quartet.phi_xw.taps.tolist(),
                "phi_xe": res.quartet.phi_xe.taps.tolist(),
                "phi_uw": res.quartet.phi_uw.taps.tolist(),
                "phi_ue": res.quartet.phi_ue.taps.tolist(),
            },
        }
        files.append(write_json(cdir / f"{name}.json", payload))
        gtxt = f" gamma={res.gamma:.4f}" if res.gamma is not None else ""
        summary.append(
            f"{name}: status={res.status} cost={res.cost:.4f}{gtxt} "
            f"residual={res.margins['realizability_residual']:.2e} "
            f"margin={res.margins.get('robustness_margin', float('nan')):.4f}"
        )
    spath = cdir / "summary.txt"
    spath.parent.mkdir(parents=True, exist_ok=True)
    spath.write_text("\n".join(summary) + "\n")
    files.append(spath)
    return files


def _jsonable(d: dict):
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        elif isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (list, tuple)):
            out[k] = [x.item() if isinstance(x, (np.floating, np.integer)) else x for x in v]
        else:
            out[k] = v
    return out


def _load_controller_entry(out: Path, name: str) -> ControllerEntry:
    path = out / "controllers" / f"{name}.json"
    if not path.exists():
        raise StageError(f"missing required artifact {path}; run 'synthesize' first")
    data = _load_json(path)
    cd = data["controller"]
    if cd["type"] == "ss":
        ctrl = StateSpaceController(Ak=np.array(cd["Ak"]), Bk=np.array(cd["Bk"]), Ck=np.array(cd["Ck"]))
        return ControllerEntry(name=name, controller=ctrl)
    ctrl = FirController(np.array(cd["taps"]), truncation_diagnostic=cd.get("truncation_diagnostic"))
    from .lti import FirOperator
    from .synthesis import RESPONSES  # noqa: F401
    qd = data["quartet"]
    from .lti import ResponseQuartet

    quartet = ResponseQuartet(
        FirOperator(np.array(qd["phi_xw"])),
        FirOperator(np.array(qd["phi_xe"])),
        FirOperator(np.array(qd["phi_uw"])),
        FirOperator(np.array(qd["phi_ue"])),
    )
    return ControllerEntry(
        name=name,
        controller=ctrl,
        quartet=quartet,
        gamma=data.get("gamma"),
        phi_xe_sel_norm=data["margins"].get("norm_phi_xe_sel"),
        margin=data["margins"].get("robustness_margin"),
    )


def _world(cfg, out: Path) -> TrackingWorld:
    ds = load_dataset(out / "dataset")
    pmap = map_from_dict(_load_json(out / "perception_map.json"))
    safety = _load_json(out / "safety_params.json")
    gamma = safety["gamma"]
    robust_path = out / "controllers" / "robust-l1.json"
    if robust_path.exists():
        g = _load_json(robust_path).get("gamma")
        if g is not None:
            gamma = g
    params = SafeSetParams(
        r=safety["r"], S=safety["S"], R0=safety["R0"], gamma=gamma,
        epsilon=safety["epsilon"], tau=safety["tau"], L=safety["L"],
    )
    base = _base_system(cfg)
    return TrackingWorld(
        esys=tracking_error_system(base),
        scene=_scene(cfg),
        pmap=pmap,
        dataset=ds,
        safety=params,
        reference=_reference(cfg),
    )


def stage_simulate(cfg, out: Path, only: str | None = None) -> list[Path]:
    world = _world(cfg, out)
    ex = cfg["experiments"]
    controllers = ex["controllers"] if only is None else [only]
    files = []
    checks = {}
    agg_series = []
    for name in controllers:
        entry = _load_controller_entry(out, name)
        ecfg = ExperimentConfig(
            rollouts=ex["rollouts"], horizon=ex["horizon"], v_bound=ex["v_bound"],
            seed=cfg["seed"], controllers=tuple(controllers),
        )
        rep = run_tracking_experiment(world, entry, ecfg)
        rows = []
        R, N = rep.tracking_err.shape
        for i in range(R):
            for k in range(N):
                rows.append(
                    (k, rep.tracking_err[i, k], rep.dist_train[i, k], rep.perception_err[i, k], i, name)
                )
        files.append(
            write_csv(out / "rollouts" / f"{name}_series.csv",
                      ["k", "tracking_err", "dist_train", "perception_err", "rollout_id", "controller"], rows)
        )
        agg_series.append((name, rep.aggregates))
        checks[name] = rep.checks
    agg_rows = []
    for name, agg in agg_series:
        for k in range(len(agg["k"])):
            agg_rows.append((int(agg["k"][k]), agg["q1"][k], agg["median"][k], agg["q3"][k], name))
    files.append(write_csv(out / "rollouts" / "aggregate.csv", ["k", "q1", "median", "q3", "controller"], agg_rows))
    files.append(write_json(out / "rollouts" / "checks.json", checks))
    series = []
    for name, agg in agg_series:
        series.append({"x": list(agg["k"]), "y": [float(v) for v in agg["median"]], "label": name})
    files.append(
        svg_line_plot(out / "plots" / "tracking_error.svg", series,
                      title="median tracking error", xlabel="step", ylabel="l-inf error")
    )
    return files


def stage_profile(cfg, out: Path) -> list[Path]:
    world = _world(cfg, out)
    pc = cfg["profile"]
    lo = world.dataset.positions.min(axis=0) - pc["pad"]
    hi = world.dataset.positions.max(axis=0) + pc["pad"]
    xs = np.arange(lo[0], hi[0] + 1e-9, pc["grid_step"])
    ys = np.arange(lo[1], hi[1] + 1e-9, pc["grid_step"])
    gx, gy = np.meshgrid(xs, ys)
    probes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    table = perception_error_profile(world.pmap, world.scene, world.dataset, probes)
    files = [write_csv(out / "profile.csv", ["dist_to_nearest_train", "error_inf", "train_index"], table)]
    dists = np.array([row[0] for row in table])
    errs = np.array([row[1] for row in table])
    order = np.argsort(dists)
    files.append(
        svg_line_plot(
            out / "plots" / "error_profile.svg",
            [{"x": list(dists[order]), "y": list(errs[order]), "label": "perception error"}],
            title="perception error vs distance to training data",
            xlabel="l-inf distance to nearest training point",
            ylabel="l-inf error",
        )
    )
    return files


def stage_necessity(cfg, out: Path) -> list[Path]:
    nc = cfg["necessity"]
    probe = necessity_demo(nc["dt"], alphas=[], T=nc["T"])
    alphas = [f / probe.S for f in nc["alpha_factors"]]
    rep = necessity_demo(nc["dt"], alphas=alphas, T=nc["T"])
    rows = [(a, r, v) for a, r, v in rep.rows]
    files = [write_csv(out / "necessity.csv", ["alpha", "spectral_radius", "verdict"], rows)]
    files.append(
        write_json(
            out / "necessity.json",
            {
                "phi_xe_norm": rep.phi_xe_norm,
                "S": rep.S,
                "J": rep.J.tolist(),
                "dc_condition_error": rep.dc_condition_error,
                "applicable": rep.applicable,
                "alpha_factors": list(nc["alpha_factors"]),
                "rows": [{"alpha": a, "spectral_radius": r, "verdict": v} for a, r, v in rep.rows],
            },
        )
    )
    return files


def stage_report(cfg, out: Path) -> list[Path]:
    lines = ["# Run report", ""]
    cpath = out / "controllers" / "summary.txt"
    if cpath.exists():
        lines += ["## Synthesis", "", "```", cpath.read_text().rstrip(), "```", ""]
    ckpath = out / "rollouts" / "checks.json"
    if ckpath.exists():
        checks = _load_json(ckpath)
        lines += ["## Rollouts", "", "| controller | max perception err | max dist to train | violations | diverged |", "|---|---|---|---|---|"]
        for name, c in checks.items():
            lines.append(
                f"| {name} | {c['max_perception_err']:.4f} | {c['max_dist_train']:.4f} "
                f"| {c['violations']} | {c['diverged_rollouts']} |"
            )
        lines += ["", "![tracking](plots/tracking_error.svg)", ""]
    npath = out / "necessity.json"
    if npath.exists():
        nec = _load_json(npath)
        lines += ["## Necessity of the robustness cap", "",
                  f"Unconstrained error-response norm {nec['phi_xe_norm']:.4f}, S = {nec['S']:.4f}.", "",
                  "| alpha | spectral radius | verdict |", "|---|---|---|"]
        for row in nec["rows"]:
            lines.append(f"| {row['alpha']:.4f} | {row['spectral_radius']:.9f} | {row['verdict']} |")
        lines.append("")
    ppath = out / "profile.csv"
    if ppath.exists():
        lines += ["## Perception error profile", "", "![profile](plots/error_profile.svg)", ""]
    path = out / "report.md"
    path.write_text("\n".join(lines))
    return [path]


STAGE_FN = {
    "generate-data": stage_generate_data,
    "train-perception": stage_train_perception,
    "estimate-safety": stage_estimate_safety,
    "synthesize": stage_synthesize,
    "simulate": stage_simulate,
    "profile": stage_profile,
    "necessity": stage_necessity,
    "report": stage_report,
}


def run_stage(stage: str, cfg: dict, out: Path, controller: str | None = None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    extra = []
    if stage == "simulate":
        names = cfg["experiments"]["controllers"] if controller is None else [controller]
        extra = [f"controllers/{n}.json" for n in names]
    _check_inputs(stage, out, extra)
    t0 = time.perf_counter()
    if stage in ("synthesize", "simulate"):
        produced = STAGE_FN[stage](cfg, out, only=controller)
    else:
        produced = STAGE_FN[stage](cfg, out)
    elapsed = time.perf_counter() - t0
    manifest = RunManifest(out)
    manifest.set_run_info(__version__, config_hash(cfg), cfg["seed"])
    manifest.data["config"] = cfg
    manifest.record_files(stage, produced, elapsed)
    manifest.save()
    return produced


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="perceptsls", description=__doc__)
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", type=Path, default=None, help="JSON config; embedded defaults when omitted")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--fast", action="store_true", help="CI profile: fewer rollouts, shorter horizons")
    parser.add_argument("--controller", choices=["lqg", "nominal-l1", "robust-l1", "robust-h2"], default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, fast=args.fast, seed=args.seed)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        produced = run_stage(args.stage, cfg, args.out, controller=args.controller)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in produced:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
