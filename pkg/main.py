""" Main Script - command line runner for training, unlearning, profiling and attacking toy diffusion models """
import argparse
import json
import logging
import math
import os
import sys
import time

from experiments.ablations import STUDIES, StudyContext, run_study
from experiments.evaluation import emit_artifacts, evaluate_attack, load_report, reference_bank
from model_inference.diffusion_core import (
    load_checkpoint, make_mixture_dataset, save_checkpoint, schedule_from_config, train_epsilon_net)
from model_inference.discrepancy import profile_correlation, unlearning_profile
from model_inference.latent_pool import LatentPool
from model_inference.unlearning import erase, load_victim, save_victim, wrap_base
from schema.config import ErasureConfig, ExperimentConfig, load_experiment_config
from schema.records import DetectorSpec
from utils.artifacts import write_json, write_manifest
from utils.detector import train_detector

# Mute plotting backend chatter
logging.getLogger('matplotlib').setLevel(logging.WARNING)
logging.getLogger('PIL').setLevel(logging.WARNING)


# region helpers
def apply_seed(cfg: ExperimentConfig, seed) -> ExperimentConfig:
    """ --seed overrides every seeded stage """
    if seed is None:
        return cfg
    return cfg.model_copy(update={
        "seed": seed,
        "training": cfg.training.model_copy(update={"seed": seed}),
        "erasure": cfg.erasure.model_copy(update={"seed": seed}),
        "attack": cfg.attack.model_copy(update={"seed": seed}),
        "profile": cfg.profile.model_copy(update={"seed": seed}),
    })


def models_dir(args) -> str:
    return os.path.join(args.out, "models")


def load_detector(args) -> DetectorSpec:
    path = os.path.join(models_dir(args), "detector.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Detector not found at: {path} (run `train` first)")
    with open(path, "r", encoding="utf-8") as f:
        return DetectorSpec.model_validate_json(f.read())


def load_references(args) -> dict:
    path = os.path.join(models_dir(args), "references.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"Reference samples not found at: {path} (run `train` first)")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_victim_for(args, cfg: ExperimentConfig, base, schedule):
    """ --victim checkpoint, else the experiment's erasure recipe applied to the base model """
    if args.victim:
        victim, _ = load_victim(args.victim)
        return victim
    return erase(base, cfg.erasure, schedule)


def open_pool(args, base) -> LatentPool:
    path = args.pool or os.path.join(args.out, "pool.jsonl")
    return LatentPool.load(path, data_dim=base.data_dim, concepts=base.concepts)
# endregion


# region subcommands
def cmd_train(args, cfg: ExperimentConfig):
    if len(cfg.mixture.means[0]) != cfg.diffusion.data_dim:
        raise ValueError(f"mixture means have dimension {len(cfg.mixture.means[0])}, "
                         f"diffusion.data_dim is {cfg.diffusion.data_dim}")
    schedule = schedule_from_config(cfg.diffusion)
    out = models_dir(args)
    os.makedirs(out, exist_ok=True)

    start = time.time()
    base = train_epsilon_net(make_mixture_dataset(cfg.mixture, seed=cfg.seed), schedule, cfg.training)
    base.model_id = "base"
    # the surrogate is a separately seeded model of the same distribution, never the base weights
    surrogate_hyper = cfg.training.model_copy(update={"seed": cfg.training.seed + 1})
    surrogate = train_epsilon_net(make_mixture_dataset(cfg.mixture, seed=cfg.seed + 1), schedule, surrogate_hyper)
    surrogate.model_id = "surrogate"
    logging.info("[TIME] - base and surrogate training takes {:.2f} seconds".format(time.time() - start))

    held = make_mixture_dataset(cfg.mixture, seed=cfg.seed + 2, n_per_concept=cfg.harness.detector_samples)
    detector = train_detector(held, cfg.harness.radius_multiplier)
    references = reference_bank(held, cfg.harness.reference_per_concept, seed=cfg.seed)

    files = [save_checkpoint(base, schedule, os.path.join(out, "base.pt")),
             save_checkpoint(surrogate, schedule, os.path.join(out, "surrogate.pt")),
             write_json(os.path.join(out, "detector.json"), detector.model_dump()),
             write_json(os.path.join(out, "references.json"), references)]
    write_manifest(out, files)


def cmd_unlearn(args, cfg: ExperimentConfig):
    base, schedule = load_checkpoint(os.path.join(models_dir(args), "base.pt"))
    out = os.path.join(models_dir(args), "victims")
    ladder = []
    for method, strengths in cfg.harness.strengths.items():
        for strength in strengths:
            erasure = ErasureConfig(**{**cfg.erasure.model_dump(), "method": method, "strength": strength,
                                       "target_concept": cfg.harness.target_concept})
            victim = erase(base, erasure, schedule)
            path = save_victim(victim, schedule, os.path.join(out, f"{method}_{strength:g}.pt"))
            ladder.append({"path": os.path.relpath(path, out), "victim_id": victim.model_id,
                           "method": method, "strength": strength})
            logging.info(f"[ERASE] {victim.model_id} ready")
    write_json(os.path.join(out, "ladder.json"), ladder)


def cmd_profile(args, cfg: ExperimentConfig):
    base, schedule = load_checkpoint(os.path.join(models_dir(args), "base.pt"))
    victims_dir = os.path.join(models_dir(args), "victims")
    ladder_path = os.path.join(victims_dir, "ladder.json")
    if not os.path.exists(ladder_path):
        raise FileNotFoundError(f"Victim ladder not found at: {ladder_path} (run `unlearn` first)")
    with open(ladder_path, "r", encoding="utf-8") as f:
        victims = [load_victim(os.path.join(victims_dir, rung["path"]))[0] for rung in json.load(f)]
    out = os.path.join(args.out, "profile")
    reports = unlearning_profile(wrap_base(base), victims, cfg.mixture.concepts, load_detector(args),
                                 cfg.profile, schedule, out_dir=out, asr_concept=cfg.harness.target_concept)
    rho = profile_correlation(reports) if len(reports) >= 2 else None
    logging.info(f"[PROFILE] spearman(mmd, naive_asr) = {rho}")
    if rho is not None and not math.isfinite(rho):
        # constant mmd or asr column; JSON has no NaN
        rho = None
    files = [os.path.join(out, name) for name in
             ("trajectory_curves.csv", "profile_reports.json", "trajectory_curves.png")]
    files.append(write_json(os.path.join(out, "correlation.json"), {"spearman_mmd_naive_asr": rho}))
    write_manifest(out, files)


def _attack_setup(args, cfg: ExperimentConfig):
    base, schedule = load_checkpoint(os.path.join(models_dir(args), "base.pt"))
    surrogate, _ = load_checkpoint(os.path.join(models_dir(args), "surrogate.pt"))
    victim = load_victim_for(args, cfg, base, schedule)
    return base, surrogate, victim, schedule


def cmd_attack(args, cfg: ExperimentConfig, mode: str = "fresh"):
    base, surrogate, victim, schedule = _attack_setup(args, cfg)
    concept = cfg.harness.target_concept
    report = evaluate_attack(victim, surrogate, concept, args.n_attacks or cfg.harness.n_attacks, mode,
                             cfg.attack, open_pool(args, base), load_detector(args),
                             load_references(args)[concept], schedule, init=args.init,
                             budget=cfg.harness.reuse_budget)
    emit_artifacts(report, os.path.join(args.out, "attack" if mode == "fresh" else "reuse"))


def cmd_report(args, cfg: ExperimentConfig):
    report = load_report(args.report)
    emit_artifacts(report, os.path.join(args.out, "report"))


def cmd_ablate(args, cfg: ExperimentConfig):
    _, surrogate, victim, schedule = _attack_setup(args, cfg)
    ctx = StudyContext(victim=victim, surrogate=surrogate, detector=load_detector(args),
                       references=load_references(args), schedule=schedule, config=cfg,
                       n_attacks=args.n_attacks)
    frame = run_study(args.study, ctx, os.path.join(args.out, "ablations"))
    logging.info(f"[EVAL] {args.study}:\n{frame.to_string(index=False)}")
# endregion


COMMANDS = {
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "profile": cmd_profile,
    "attack": cmd_attack,
    "reuse": lambda args, cfg: cmd_attack(args, cfg, mode="reuse"),
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Red-team unlearned toy diffusion models by latent optimization.")
    parser.add_argument('command', choices=sorted(COMMANDS), help='Stage to run.')
    parser.add_argument('--config', type=str, default=None, help='Versioned JSON experiment config.')
    parser.add_argument('--seed', type=int, default=None, help='Override every seed in the config.')
    parser.add_argument('--out', type=str, default='runs', help='Run directory for models and artifacts.')
    parser.add_argument('--pool', type=str, default=None, help='Latent pool JSONL (default <out>/pool.jsonl).')
    parser.add_argument('--victim', type=str, default=None, help='Victim checkpoint; default applies the config erasure.')
    parser.add_argument('--n-attacks', dest='n_attacks', type=int, default=None, help='Override harness.n_attacks.')
    parser.add_argument('--init', choices=['inversion', 'gaussian'], default='inversion',
                        help='Initial latent for fresh attacks.')
    parser.add_argument('--report', type=str, default=None, help='report.json to re-render (report command).')
    parser.add_argument('--study', choices=sorted(STUDIES), default=None, help='Study to run (ablate command).')
    parser.add_argument('--log-level', dest='log_level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Root logger level.')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(message)s')
    if args.command == "report" and not args.report:
        logging.error("report needs --report <path to report.json>")
        return 2
    if args.command == "ablate" and not args.study:
        logging.error("ablate needs --study <name>")
        return 2
    try:
        cfg = apply_seed(load_experiment_config(args.config), args.seed)
        start = time.time()
        COMMANDS[args.command](args, cfg)
        logging.info("[TIME] - {} takes {:.2f} seconds".format(args.command, time.time() - start))
    except Exception as e:
        logging.error(f"{args.command} failed: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
