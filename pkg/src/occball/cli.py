"""Command-line entry points for the benchmark pipeline."""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click

from .cartpole import (
    EpisodeConfig,
    PhysicalParams,
    episode_metadata,
    linearize,
    make_sensor,
    run_episode,
    save_trajectory,
)
from .controllers import LtiController, ZeroController, load_controller, save_controller
from .harness import ExperimentSpec, evaluate, max_stabilized_angle, run_sweep
from .linalg import PoleZeroSet, StateSpaceModel
from .rngtools import substream_seed
from .sysid import (
    collect_budget,
    dataset_hash,
    fit_arx,
    fit_full_state,
    ho_kalman,
    save_dataset,
)
from .synthesis import EPSILON_BY_TIER, build_generalized_plant, hinf_synthesize

SENSOR_ALIASES = {
    "true_z": "noise_free",
    "depth": "depth_like",
    "rgb": "rgb_like",
    "noise_free": "noise_free",
    "depth_like": "depth_like",
    "rgb_like": "rgb_like",
}


def _tier(name: str) -> str:
    return SENSOR_ALIASES[name]


def _load_any_controller(path: str):
    path = Path(path)
    with open(path) as f:
        head = json.load(f)
    if "blob" in head:
        from .sac import PolicyController, load_policy

        return PolicyController(load_policy(path))
    model, _ = load_controller(path)
    return LtiController(model)


@click.group()
def main():
    """Occluded cartpole balancing benchmark."""


@main.command("limits")
@click.option("--fixation", "-f", "fixations", multiple=True, type=float,
              default=(1.0, 0.9, 0.8, 0.7), show_default=True)
@click.option("--out", type=click.Path(), default=None, help="CSV output path (default: stdout).")
def limits_cmd(fixations, out):
    """Print (fixation, pole, zero, bound) for the true linearization."""
    lines = ["ell0,pole,zero,bound"]
    for ell0 in fixations:
        model = linearize(PhysicalParams(ell0=ell0))
        pz = PoleZeroSet.from_model(model)
        ups = pz.unstable_poles()
        uzs = pz.unstable_zeros()
        from .limits import pole_zero_bound

        bound = pole_zero_bound(ups, uzs)
        p = max((x.real for x in ups), default=math.nan)
        q = max((x.real for x in uzs), default=math.nan)
        lines.append(f"{ell0},{repr(p)},{repr(q)},{repr(bound.value)}")
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command("simulate")
@click.option("--fixation", type=float, default=1.0, show_default=True)
@click.option("--sensor", type=click.Choice(sorted(SENSOR_ALIASES)), default="true_z",
              show_default=True)
@click.option("--controller", "controller_path", type=click.Path(exists=True), default=None,
              help="Controller JSON (LTI or policy); default is zero input.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
def simulate_cmd(fixation, sensor, controller_path, seed, out_dir):
    """Run one episode and write its trajectory CSV plus metadata."""
    params = PhysicalParams(ell0=fixation)
    config = EpisodeConfig(seed=seed)
    spec = make_sensor(_tier(sensor), params, config)
    controller = _load_any_controller(controller_path) if controller_path else ZeroController()
    result, traj = run_episode(params, config, controller, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectory(out / "trajectory.csv", traj,
                    meta=episode_metadata(params, config, spec, result))
    click.echo(f"steps={result.steps} success={result.success} cause={result.cause}")


@main.command("sysid")
@click.option("--fixation", type=float, default=1.0, show_default=True)
@click.option("--sensor", type=click.Choice(sorted(SENSOR_ALIASES)), default="true_z",
              show_default=True)
@click.option("--budget", type=int, default=20000, show_default=True)
@click.option("--order-p", type=int, default=10, show_default=True)
@click.option("--order-n", type=int, default=4, show_default=True)
@click.option("--method", type=click.Choice(["arxhk", "fullstate"]), default="arxhk",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Identified model JSON path.")
@click.option("--save-data", type=click.Path(), default=None,
              help="Optionally persist the dataset to this directory.")
def sysid_cmd(fixation, sensor, budget, order_p, order_n, method, seed, out, save_data):
    """Collect excitation data and identify a model."""
    params = PhysicalParams(ell0=fixation)
    tier = _tier(sensor)
    spec = make_sensor(tier, params)
    data = collect_budget(params, spec, budget, seed=seed)
    if save_data:
        save_dataset(save_data, data, {
            "seed": seed, "fixation": fixation, "sensor": tier, "budget": budget,
        })
    if method == "arxhk":
        model = ho_kalman(fit_arx(data, order_p), order_n).to_model(params.tau)
    else:
        model = fit_full_state(data, params.ell0, params.tau)
    payload = model.to_dict()
    payload["metadata"] = {
        "method": method, "fixation": fixation, "sensor": tier, "budget": budget,
        "seed": seed, "order_p": order_p, "order_n": order_n,
        "dataset_hash": dataset_hash(data),
    }
    with open(out, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"identified {method} model with {budget} samples -> {out}")


@main.command("synth")
@click.option("--model-in", type=click.Path(exists=True), required=True)
@click.option("--epsilon", type=float, default=None,
              help="Control-effort weight; defaults to the tier the model was fit on.")
@click.option("--out", type=click.Path(), required=True)
def synth_cmd(model_in, epsilon, out):
    """Synthesize an H-infinity controller for an identified model."""
    with open(model_in) as f:
        payload = json.load(f)
    metadata = payload.pop("metadata", {})
    model = StateSpaceModel.from_dict(payload)
    if epsilon is None:
        epsilon = EPSILON_BY_TIER.get(metadata.get("sensor", "noise_free"), 5e-3)
    syn = hinf_synthesize(build_generalized_plant(model, epsilon))
    if not syn.feasible:
        click.echo(f"synthesis infeasible: {syn.diagnostics.get('reason', '')}", err=True)
        sys.exit(1)
    save_controller(out, syn.controller, metadata={
        "epsilon": syn.epsilon,
        "gamma_achieved": syn.gamma_achieved,
        "gamma_design": syn.gamma_design,
        "source_model": str(model_in),
        "source_metadata": metadata,
    })
    click.echo(f"gamma={syn.gamma_achieved:.6g} -> {out}")


@main.command("train-rl")
@click.option("--fixation", type=float, default=1.0, show_default=True)
@click.option("--sensor", type=click.Choice(sorted(SENSOR_ALIASES)), default="true_z",
              show_default=True)
@click.option("--episodes", type=int, default=2000, show_default=True)
@click.option("--alpha", type=float, default=None,
              help="Entropy temperature; defaults to 0.2 (0.01 for rgb).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--log-every", type=int, default=100, show_default=True,
              help="Progress line every N episodes (0 disables).")
@click.option("--out-dir", type=click.Path(), required=True)
def train_rl_cmd(fixation, sensor, episodes, alpha, seed, log_every, out_dir):
    """Train a soft actor-critic agent and save policy plus learning curve."""
    from .sac import SacConfig, save_policy, train

    params = PhysicalParams(ell0=fixation)
    tier = _tier(sensor)
    spec = make_sensor(tier, params)
    if alpha is None:
        alpha = 0.01 if tier == "rgb_like" else 0.2
    config = SacConfig(seed=seed, alpha=alpha)

    def progress(episode, running, steps):
        if log_every and episode % log_every == 0:
            click.echo(f"episode {episode}: running reward {running:.1f} ({steps} steps)", err=True)

    result = train(params, spec, config, max_episodes=episodes, progress=progress)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w") as f:
        f.write("episode,running_reward,steps_cumulative\n")
        for e, r, s in result.curve:
            f.write(f"{e},{repr(r)},{s}\n")
    save_policy(out / "policy.json", result.agent.policy, metadata={
        "fixation": fixation, "sensor": tier, "seed": seed,
        "episodes_run": result.episodes_run, "stop_reason": result.stop_reason,
    })
    click.echo(
        f"trained {result.episodes_run} episodes (stop: {result.stop_reason}); "
        f"final running reward {result.curve[-1][1]:.1f}"
    )


@main.command("eval")
@click.option("--controller", "controller_path", type=click.Path(exists=True), required=True)
@click.option("--fixation", type=float, default=1.0, show_default=True)
@click.option("--sensor", type=click.Choice(sorted(SENSOR_ALIASES)), default="true_z",
              show_default=True)
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--max-angle/--no-max-angle", default=True, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def eval_cmd(controller_path, fixation, sensor, episodes, max_angle, seed, out):
    """Evaluate a saved controller: average reward, success rate, max angle."""
    params = PhysicalParams(ell0=fixation)
    spec = make_sensor(_tier(sensor), params)
    controller = _load_any_controller(controller_path)
    ev = evaluate(controller, params, spec, episodes, seed=seed)
    report = {
        "fixation": fixation,
        "sensor": spec.tier,
        "episodes": episodes,
        "seed": seed,
        "avg_reward": ev.avg_reward,
        "success_rate": ev.success_rate,
    }
    if max_angle:
        angle = max_stabilized_angle(controller, params, spec,
                                     probe_seed=substream_seed(seed, "angle-probe"))
        report["max_angle_deg"] = angle.angle_deg
        report["angle_monotonic"] = angle.monotonic
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    click.echo(text, nl=False)


@main.command("sweep")
@click.option("--spec", "spec_path", type=click.Path(exists=True), required=True,
              help="Experiment spec JSON.")
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
def sweep_cmd(spec_path, out_dir, jobs, seed):
    """Run a full experiment grid and write per-cell and median CSVs."""
    spec = ExperimentSpec.from_json(spec_path)
    if seed is not None:
        spec = ExperimentSpec(**{**spec.__dict__, "seed": seed})
    rows = run_sweep(spec, out_dir, jobs=jobs)
    failures = [r for r in rows if r["error"]]
    click.echo(f"{len(rows)} cells ({len(failures)} with errors) -> {out_dir}")


if __name__ == "__main__":
    main()
