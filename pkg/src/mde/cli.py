"""Command-line entry point: prepare | train | eval | ablate | gen-synth | grad-check."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from . import data as D
from .config import RunConfig, dump_config, load_config, stream, stream_seed
from .errors import ConfigError, DataError, MDEError, NumericalError
from .graph import GraphBundle, build_graphs, load_csr, load_sidecar, save_csr
from .losses import LossConfig
from .model import init_params, load_checkpoint
from .optim import Objective, grad_check
from .traineval import (
    AblationSpec,
    TrainConfig,
    ablation_table,
    evaluate_params,
    make_objective,
    run_ablation,
    train,
)

log = logging.getLogger("mde")

GRAPH_FILES = {"hetero": "hetero.csr", "user": "user.csr", "visual": "item_visual.csr", "textual": "item_textual.csr"}


# --- config -> module settings ------------------------------------------------


def ablation_of(cfg: RunConfig) -> AblationSpec:
    return AblationSpec(cfg.disable_mda, cfg.disable_msa, cfg.disable_nlt,
                        cfg.fixed_pref_wt, cfg.independent_weights)


def loss_of(cfg: RunConfig) -> LossConfig:
    return LossConfig(cfg.sigma_diff, cfg.sigma_cl, cfg.sigma_reg, cfg.tau, cfg.cl_scope, cfg.mda_form)


def train_config_of(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        d=cfg.d, layers=cfg.layers, lr=cfg.lr, batch_size=cfg.batch_size, patience=cfg.patience,
        max_epochs=cfg.max_epochs, early_stop_k=cfg.early_stop_k,
        early_stop_split=cfg.early_stop_split, seed=cfg.seed,
        loss=loss_of(cfg), ablation=ablation_of(cfg),
    )


# --- prepare ------------------------------------------------------------------


@dataclass
class Prepared:
    ds: D.InteractionDataset
    features: dict[str, D.ModalityFeatures]
    graphs: GraphBundle
    graph_hash: str
    cache_hit: bool
    directory: Path


def _require(path: str | None, key: str) -> Path:
    if not path:
        raise ConfigError(f"config key {key!r} is required for this command")
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file for {key}: {p}")
    return p


def _graph_hash(ds, feats, cfg: RunConfig) -> str:
    h = hashlib.sha256(ds.fingerprint().encode())
    for m in D.MODALITIES:
        h.update(m.encode())
        h.update(feats[m].matrix.astype("<f8").tobytes())
    h.update(f"k_item={cfg.k_item};k_user={cfg.k_user}".encode())
    return h.hexdigest()[:16]


def _load_cached_graphs(gdir: Path, graph_hash: str) -> GraphBundle | None:
    """Return cached graphs if every file is intact and carries ``graph_hash``."""
    loaded = {}
    for key, name in GRAPH_FILES.items():
        path = gdir / name
        if not path.exists():
            return None
        meta = load_sidecar(path)
        if meta is None or meta.get("config_hash") != graph_hash:
            return None
        try:
            loaded[key] = load_csr(path)
        except DataError as exc:
            log.warning("corrupted graph cache %s (%s); rebuilding", path, exc)
            return None
    return GraphBundle(loaded["hetero"], {m: loaded[m] for m in D.MODALITIES}, loaded["user"])


def cmd_prepare(cfg: RunConfig) -> Prepared:
    ds = D.load_interactions(_require(cfg.interactions, "interactions"))
    feats = {
        "visual": D.load_features(_require(cfg.visual_features, "visual_features"), "visual"),
        "textual": D.load_features(_require(cfg.textual_features, "textual_features"), "textual"),
    }
    D.check_features(ds, list(feats.values()))
    if not ds.is_split():
        ds = D.split_dataset(ds, cfg.split_ratios, stream_seed(cfg.seed, "split"))
    ghash = _graph_hash(ds, feats, cfg)

    pdir = cfg.out / "prepared"
    gdir = pdir / "graphs"
    manifest_path = pdir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if manifest.get("graph_hash") == ghash:
        graphs = _load_cached_graphs(gdir, ghash)
        if graphs is not None:
            print(f"cache hit ({ghash})")
            return Prepared(ds, feats, graphs, ghash, True, pdir)

    gdir.mkdir(parents=True, exist_ok=True)
    D.save_interactions(ds, pdir / "interactions.tsv")
    D.save_id_maps(ds, pdir)
    graphs = build_graphs(ds, feats, cfg.k_item, cfg.k_user)
    mats = {"hetero": graphs.hetero, "user": graphs.user_homo, **graphs.item_homo}
    for key, name in GRAPH_FILES.items():
        k = {"hetero": None, "user": cfg.k_user}.get(key, cfg.k_item)
        save_csr(mats[key], gdir / name, {
            "dataset_hash": ds.fingerprint(), "config_hash": ghash, "K": k,
            "modality": key if key in D.MODALITIES else None, "kind": key,
        })
    manifest = {
        "graph_hash": ghash,
        "dataset_hash": ds.fingerprint(),
        "config_hash": cfg.hash(),
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "edges": {s: int((ds.splits == c).sum()) for c, s in enumerate(D.SPLIT_NAMES[:3])},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2))
    print(f"prepared {ds.num_users} users, {ds.num_items} items, "
          f"{ds.num_edges} edges -> {pdir} ({ghash})")
    return Prepared(ds, feats, graphs, ghash, False, pdir)


# --- other commands ---------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> Path:
    prep = cmd_prepare(cfg)
    tdir = cfg.out / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    tcfg = train_config_of(cfg)
    ckpt = tdir / "checkpoint.npz"
    meta = {
        "config_hash": cfg.hash(),
        "graph_hash": prep.graph_hash,
        "layers": cfg.layers,
        "ablation": asdict(tcfg.ablation),
        "seed": cfg.seed,
    }
    res = train(prep.ds, prep.features, prep.graphs, tcfg,
                log_path=tdir / "train_log.jsonl", checkpoint_path=ckpt, checkpoint_meta=meta)
    with open(tdir / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for rec in res.history:
            fh.write(json.dumps(rec) + "\n")
    print(f"trained {res.epochs_run} epochs; best epoch {res.best_epoch} "
          f"{cfg.early_stop_split} recall@{cfg.early_stop_k}={res.best_metric:.4f}")
    print(f"checkpoint: {ckpt}")
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, split: str = "test", K: int | None = None):
    prep = cmd_prepare(cfg)
    ckpt = Path(checkpoint) if checkpoint else cfg.out / "train" / "checkpoint.npz"
    params, meta = load_checkpoint(ckpt)
    if meta.get("graph_hash") != prep.graph_hash:
        raise DataError(
            f"checkpoint {ckpt} was trained on graphs {meta.get('graph_hash')}, "
            f"caches are {prep.graph_hash}"
        )
    spec = AblationSpec(**meta.get("ablation", {}))
    tcfg = train_config_of(cfg)
    tcfg.layers = meta.get("layers", cfg.layers)
    tcfg.ablation = spec
    obj = make_objective(tcfg, prep.features, prep.graphs)
    report = evaluate_params(params, obj, prep.ds, split, K or cfg.eval_k)
    edir = cfg.out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    report.to_json(edir / f"metrics_{split}.json")
    report.to_tsv(edir / f"metrics_{split}.tsv")
    for k, v in report.as_dict().items():
        print(f"{k}\t{v}")
    return report


def cmd_ablate(cfg: RunConfig) -> str:
    prep = cmd_prepare(cfg)
    specs = [AblationSpec.parse(v) for v in cfg.ablate_variants]
    rows = run_ablation(prep.ds, prep.features, prep.graphs, train_config_of(cfg),
                        specs, list(cfg.ablate_seeds), cfg.eval_k)
    table = ablation_table(rows)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "ablation.tsv").write_text(table)
    print(table, end="")
    return table


def cmd_gen_synth(cfg: RunConfig) -> dict[str, Path]:
    ds, fv, ft = D.generate_synthetic(
        cfg.synth_users, cfg.synth_items, cfg.synth_d_v, cfg.synth_d_t,
        cfg.synth_clusters, stream_seed(cfg.seed, "synth"),
    )
    sdir = cfg.out / "synth"
    paths = {
        "interactions": Path(cfg.interactions) if cfg.interactions else sdir / "interactions.tsv",
        "visual_features": Path(cfg.visual_features) if cfg.visual_features else sdir / "visual.tsv",
        "textual_features": Path(cfg.textual_features) if cfg.textual_features else sdir / "textual.tsv",
    }
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    D.save_interactions(ds, paths["interactions"])
    D.save_features(fv, paths["visual_features"])
    D.save_features(ft, paths["textual_features"])
    print(f"wrote {ds.num_users} users, {ds.num_items} items, {ds.num_edges} edges")
    for k, p in paths.items():
        print(f"{k}: {p}")
    return paths


def gradcheck_instance(cfg: RunConfig):
    """Tiny synthetic problem with every loss term active and non-trivial preferences."""
    rng = stream(cfg.seed, "gradcheck")
    ds, fv, ft = D.generate_synthetic(cfg.gradcheck_users, cfg.gradcheck_items, 6, 5,
                                      2, int(rng.integers(2**31)))
    ds = D.split_dataset(ds, cfg.split_ratios, int(rng.integers(2**31)))
    feats = {"visual": fv, "textual": ft}
    graphs = build_graphs(ds, feats, cfg.k_item, cfg.k_user)
    spec = ablation_of(cfg)
    params = init_params(ds.num_users, ds.num_items, {"visual": 6, "textual": 5},
                         cfg.gradcheck_d, rng, tradeoff_logits=spec.independent_weights)
    for k in params:
        if k.startswith(("pref_logits", "proj_bias", "tradeoff_logits")):
            params[k] = rng.normal(size=params[k].shape)
    loss, tradeoff, fixed = spec.apply(loss_of(cfg))
    obj = Objective(feats, graphs, loss, cfg.layers, fixed, tradeoff)
    u, i = ds.pairs("train")
    batch = D.NegativeSampler(ds).sample(u, i, rng)
    return params, obj, batch


def cmd_gradcheck(cfg: RunConfig):
    params, obj, batch = gradcheck_instance(cfg)
    report = grad_check(params, obj, batch, sample=cfg.gradcheck_samples, seed=cfg.seed)
    print(report.table())
    cfg.out.mkdir(parents=True, exist_ok=True)
    report.to_json(cfg.out / "gradcheck.json")
    if not report.passed:
        raise NumericalError(f"{len(report.failures)} gradient coordinates disagree with finite differences")
    return report


# --- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mde", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("prepare", "train", "eval", "ablate", "gen-synth", "grad-check"):
        s = sub.add_parser(name)
        s.add_argument("-c", "--config", help="YAML config file")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        s.add_argument("--output-dir")
        s.add_argument("--seed", type=int)
        if name == "eval":
            s.add_argument("--checkpoint")
            s.add_argument("--split", choices=("val", "test", "train"), default="test")
            s.add_argument("-k", type=int, dest="K")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.overrides)
        if args.output_dir:
            overrides["output_dir"] = args.output_dir
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        print("# resolved config")
        print(dump_config(cfg), end="")
        print(f"# seed: {cfg.seed}  config hash: {cfg.hash()}")
        cmd = args.command
        if cmd == "prepare":
            cmd_prepare(cfg)
        elif cmd == "train":
            cmd_train(cfg)
        elif cmd == "eval":
            cmd_eval(cfg, args.checkpoint, args.split, args.K)
        elif cmd == "ablate":
            cmd_ablate(cfg)
        elif cmd == "gen-synth":
            cmd_gen_synth(cfg)
        elif cmd == "grad-check":
            cmd_gradcheck(cfg)
    except MDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
