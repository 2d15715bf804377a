"""Scripted experiment suites: toy memorization, ratio sweep, trigger
modes, secondary poisoning, minimum modification, defense evaluation."""

from __future__ import annotations

import csv
import os
from dataclasses import replace

import numpy as np

from ..backends import ModelHandle, ToyBackend
from ..backends.base import ConfigError
from ..core import CaptionedSample, Dataset, Image, LogoRef, Rng, load_dataset
from ..defense import samplewise_filter, setbased_filter
from ..detection import (Embedder, TemplateProposer, ToyEmbedder,
                         flatten_alpha)
from ..maskgen import MaskConstraints
from ..metrics import AttackReport, HashJointEmbedder, delta_perf, fae, lir, stealth_report
from ..poisoner import PoisonPlan, poison_dataset
from .config import ExperimentConfig
from .ledger import Ledger
from .synth import (COLOR_WORDS, FAMILY_WORDS, OBJECT_WORDS, default_glyph,
                    synth_corpus)


def make_backend(config: ExperimentConfig, root: str) -> ToyBackend:
    from ..backends.schedule import NoiseSchedule
    return ToyBackend(root=root, resolution=config.backend.resolution,
                      schedule=NoiseSchedule.cosine(config.backend.schedule_steps),
                      batch_size=config.train.batch,
                      learning_rate=config.train.learning_rate,
                      draws_per_sample=config.backend.draws_per_sample)


def make_logo(config: ExperimentConfig) -> LogoRef:
    if config.logo == "toy-glyph":
        return default_glyph()
    from ..core import load_image
    img = load_image(config.logo)
    return LogoRef.from_canonical(os.path.basename(config.logo), img)


def make_detector(logo: LogoRef) -> tuple[TemplateProposer, Embedder]:
    return TemplateProposer(logo), ToyEmbedder(grid=12, color=True)


def make_eval_prompts(n: int, rng: Rng, exclude: set[str] = frozenset(),
                      suffix: str = "") -> list[str]:
    """Trigger-free evaluation prompts drawn from the caption vocabulary,
    avoiding captions seen in training and the word 'logo'."""
    g = rng.child("prompts").generator()
    colors, fams, objs = list(COLOR_WORDS), list(FAMILY_WORDS.values()), list(OBJECT_WORDS)
    prompts: list[str] = []
    seen = set(exclude)
    guard = 0
    while len(prompts) < n and guard < 50 * n:
        guard += 1
        p = (f"a {fams[g.integers(0, len(fams))]} "
             f"{colors[g.integers(0, len(colors))]} {objs[g.integers(0, len(objs))]}")
        if suffix:
            p = f"{p} {suffix}"
        if p in seen or "logo" in p:
            continue
        seen.add(p)
        prompts.append(p)
    return prompts


def corpus_for(config: ExperimentConfig, rng: Rng) -> Dataset:
    if config.dataset:
        return load_dataset(config.dataset)
    return synth_corpus(config.corpus_size, rng.child("corpus"),
                        resolution=config.backend.resolution)


def direct_composites(dataset: Dataset, logo: LogoRef, rng: Rng,
                      ratio: float = 1.0,
                      identifier_caption: bool = False) -> Dataset:
    """Paste the glyph at random positions without any stealth pipeline.

    With identifier_caption the identifier token is appended, producing
    the personalization fine-tuning set."""
    g = rng.child("composite").generator()
    n = len(dataset)
    quota = int(np.ceil(ratio * n)) if ratio > 0 else 0
    target_idx = set(g.permutation(n)[:quota].tolist())
    glyph = flatten_alpha(logo.canonical.pixels)
    gh, gw = glyph.shape[:2]
    samples = []
    for i, s in enumerate(dataset):
        if i not in target_idx:
            samples.append(s)
            continue
        px = s.image.rgb().copy()
        H, W = px.shape[:2]
        y = int(g.integers(0, H - gh + 1))
        x = int(g.integers(0, W - gw + 1))
        px[y:y + gh, x:x + gw] = glyph
        caption = s.caption
        if identifier_caption:
            caption = f"{logo.identifier_token} pasted on {s.caption}"
        samples.append(replace(s, image=Image(px, id=s.id), caption=caption))
    return Dataset(samples=tuple(samples), split_tag=dataset.split_tag)


def personalize(backend: ToyBackend, corpus: Dataset, logo: LogoRef, rng: Rng,
                epochs: int, base: ModelHandle | None = None,
                use_regularization: bool = True) -> ModelHandle:
    """Logo-adaptation fine-tuning on identifier-token composites.

    The original corpus serves as the regularization dataset (the
    class-prior term is excluded by default elsewhere; this mode is the
    style-preserving variant)."""
    composites = direct_composites(corpus, logo, rng.child("personalize"),
                                   ratio=1.0, identifier_caption=True)
    kwargs = {}
    if use_regularization:
        kwargs = {"regularization": corpus, "reg_weight": 1.0}
    return backend.train(composites, epochs=epochs, rng=rng.child("personalize/train"),
                         finetune_from=base, **kwargs)


def _eval_lir(backend, model, config, logo, rng, corpus, suffix: str = "",
              n_prompts: int | None = None) -> AttackReport:
    proposer, embedder = make_detector(logo)
    seen = {s.caption for s in corpus}
    prompts = make_eval_prompts(n_prompts or config.eval.n_lir_prompts,
                                rng, exclude=seen, suffix=suffix)
    return lir(backend, model, prompts, logo, config.eval.tau,
               proposer, embedder, rng.child("lir"))


def run_memorization(config: ExperimentConfig, ledger: Ledger, root: str,
                     variant: str = "direct") -> AttackReport:
    """Repeated-pattern memorization at desk scale.

    variant 'direct': every target carries a random-position glyph paste
    (no stealth); 'poison': the full stealth pipeline; 'clean': no glyph
    at all (control)."""
    rng = Rng(config.seed, config.experiment_id)
    backend = make_backend(config, root)
    logo = make_logo(config)
    chash = config.config_hash()
    corpus = corpus_for(config, rng)
    ledger.append(config.experiment_id, chash, "corpus",
                  {"n": len(corpus), "variant": variant})
    try:
        if variant == "clean":
            train_set = corpus
        elif variant == "direct":
            train_set = direct_composites(corpus, logo, rng, ratio=config.plan.ratio)
        elif variant == "poison":
            model_p = personalize(backend, corpus, logo, rng,
                                  config.train.personalize_epochs)
            proposer, embedder = make_detector(logo)
            poisoned, records = poison_dataset(
                backend, model_p, corpus, logo, config.plan, config.constraints,
                rng.child("poison"), proposer, embedder)
            ledger.append(config.experiment_id, chash, "poison",
                          {"poisoned": len(poisoned.poisoned_ids),
                           "warnings": poisoned.warnings,
                           "records": [r.to_row() for r in records]})
            train_set = poisoned.dataset
        else:
            raise ConfigError(f"unknown memorization variant {variant!r}")

        model = backend.train(train_set, epochs=config.train.epochs,
                              rng=rng.child("train"))
        ledger.append(config.experiment_id, chash, "train",
                      {"weights_ref": model.weights_ref,
                       "loss_history": backend.loss_history(model)})
        report = _eval_lir(backend, model, config, logo, rng, corpus)
        ledger.append(config.experiment_id, chash, "eval", report.to_row())
        return report
    except Exception as e:
        ledger.append(config.experiment_id, chash, "failed",
                      {"error": str(e), "variant": variant})
        raise


def run_ratio_sweep(config: ExperimentConfig, ledger: Ledger, root: str,
                    ratios: list[float], variant: str = "poison",
                    track_fae: bool = True) -> list[AttackReport]:
    """One full poison -> train -> eval run per ratio with a shared seed."""
    if ratios != sorted(ratios):
        raise ConfigError("ratios must be sorted ascending")
    rng = Rng(config.seed, config.experiment_id)
    backend = make_backend(config, root)
    logo = make_logo(config)
    proposer, embedder = make_detector(logo)
    chash = config.config_hash()
    corpus = corpus_for(config, rng)
    model_p = None
    if variant == "poison":
        model_p = personalize(backend, corpus, logo, rng,
                              config.train.personalize_epochs)
    reports = []
    for ratio in ratios:
        plan = replace(config.plan, ratio=ratio)
        if variant == "poison":
            poisoned, _ = poison_dataset(backend, model_p, corpus, logo, plan,
                                         config.constraints,
                                         rng.child(f"poison@{ratio}"),
                                         proposer, embedder)
            train_set = poisoned.dataset
        else:
            train_set = direct_composites(corpus, logo, rng, ratio=ratio)
        model = backend.train(train_set, epochs=config.train.epochs,
                              rng=rng.child("train"),
                              keep_epoch_checkpoints=track_fae)
        report = _eval_lir(backend, model, config, logo, rng.child(f"eval@{ratio}"),
                           corpus)
        fae_epoch = None
        if track_fae:
            probe = make_eval_prompts(1, rng.child("probe"),
                                      exclude={s.caption for s in corpus})[0]
            fae_epoch = fae(backend, backend.epoch_checkpoints(model), probe,
                            logo, config.eval.tau, proposer, embedder,
                            rng.child(f"fae@{ratio}"),
                            images_per_epoch=config.eval.images_per_epoch)
        report = AttackReport(lir=report.lir, fae=fae_epoch,
                              per_prompt=report.per_prompt)
        ledger.append(config.experiment_id, chash, "ratio",
                      {"ratio": ratio, "lir": report.lir, "fae": report.fae})
        reports.append(report)
    return reports


def run_trigger_experiment(config: ExperimentConfig, ledger: Ledger, root: str,
                           variant: str = "direct") -> dict:
    """LIR with trigger-bearing prompts versus plain prompts."""
    plan = config.plan
    if plan.trigger.mode == "none":
        raise ConfigError("trigger experiment needs a trigger in the plan")
    rng = Rng(config.seed, config.experiment_id)
    backend = make_backend(config, root)
    logo = make_logo(config)
    chash = config.config_hash()
    corpus = corpus_for(config, rng)

    if plan.trigger.mode == "category":
        word = plan.trigger.text.lower()
        if not any(word in s.caption.lower() for s in corpus):
            raise ConfigError(f"category trigger {plan.trigger.text!r} matches no captions")

    if variant == "poison":
        model_p = personalize(backend, corpus, logo, rng,
                              config.train.personalize_epochs)
        proposer, embedder = make_detector(logo)
        poisoned, _ = poison_dataset(backend, model_p, corpus, logo, plan,
                                     config.constraints, rng.child("poison"),
                                     proposer, embedder)
        train_set = poisoned.dataset
    else:
        # direct composites on the trigger-selected subset
        from ..poisoner import select_targets
        order = select_targets(corpus, plan, rng)
        quota = int(np.ceil(plan.ratio * len(corpus)))
        chosen = set(order[:quota])
        g = rng.child("composite").generator()
        glyph = flatten_alpha(logo.canonical.pixels)
        gh, gw = glyph.shape[:2]
        samples = []
        for s in corpus:
            if s.id not in chosen:
                samples.append(s)
                continue
            px = s.image.rgb().copy()
            y = int(g.integers(0, px.shape[0] - gh + 1))
            x = int(g.integers(0, px.shape[1] - gw + 1))
            px[y:y + gh, x:x + gw] = glyph
            caption = s.caption
            if plan.trigger.mode == "caption_suffix":
                caption = f"{caption} {plan.trigger.text}".strip()
            samples.append(replace(s, image=Image(px, id=s.id), caption=caption))
        train_set = Dataset(samples=tuple(samples), split_tag=corpus.split_tag)

    model = backend.train(train_set, epochs=config.train.epochs,
                          rng=rng.child("train"))
    suffix = plan.trigger.text if plan.trigger.mode == "caption_suffix" else ""
    trig_suffix = suffix
    if plan.trigger.mode == "category":
        trig_suffix = ""  # category prompts must mention the category word
    plain = _eval_lir(backend, model, config, logo, rng.child("plain"), corpus)
    if plan.trigger.mode == "category":
        word = plan.trigger.text
        seen = {s.caption for s in corpus}
        prompts = [p.rsplit(" ", 1)[0] + f" {word}" for p in make_eval_prompts(
            config.eval.n_lir_prompts, rng.child("trigprompts"), exclude=seen)]
        proposer, embedder = make_detector(logo)
        trig = lir(backend, model, prompts, logo, config.eval.tau, proposer,
                   embedder, rng.child("triglir"))
    else:
        trig = _eval_lir(backend, model, config, logo, rng.child("trig"),
                         corpus, suffix=trig_suffix)
    out = {"lir_trigger": trig.lir, "lir_plain": plain.lir,
           "trigger": plan.trigger.mode, "text": plan.trigger.text}
    ledger.append(config.experiment_id, chash, "trigger", out)
    return out


def run_secondary_poisoning(config: ExperimentConfig, ledger: Ledger, root: str,
                            primary: ModelHandle, n_generated: int = 64
                            ) -> tuple[float, float]:
    """Train a fresh model on the primary's generations (no filtering) and
    compare LIRs."""
    if n_generated < 16:
        raise ConfigError("n_generated must be >= 16")
    rng = Rng(config.seed, config.experiment_id)
    backend = make_backend(config, root)
    logo = make_logo(config)
    chash = config.config_hash()
    corpus = corpus_for(config, rng)
    seen = {s.caption for s in corpus}
    gen_prompts = make_eval_prompts(n_generated, rng.child("genprompts"),
                                    exclude=seen)
    images = backend.generate_batch(primary, gen_prompts, rng.child("gen"))
    from ..core import shannon_entropy
    samples = tuple(
        CaptionedSample(image=Image(img.pixels, id=f"sec_{i:04d}"),
                        caption=p, entropy=shannon_entropy(img),
                        source_tag="secondary")
        for i, (img, p) in enumerate(zip(images, gen_prompts)))
    sec_set = Dataset(samples=samples, split_tag="secondary")
    secondary = backend.train(sec_set, epochs=config.train.epochs,
                              rng=rng.child("sectrain"))
    lir_primary = _eval_lir(backend, primary, config, logo,
                            rng.child("evalp"), corpus).lir
    lir_secondary = _eval_lir(backend, secondary, config, logo,
                              rng.child("evals"), corpus).lir
    ledger.append(config.experiment_id, chash, "secondary",
                  {"lir_primary": lir_primary, "lir_secondary": lir_secondary,
                   "n_generated": n_generated})
    return lir_primary, lir_secondary


def run_defense(config: ExperimentConfig, ledger: Ledger, dataset: Dataset,
                poisoned_ids: set[str]) -> dict:
    """Sample-wise and set-based filtering on a (possibly poisoned) dataset."""
    chash = config.config_hash()
    sw = samplewise_filter(dataset, align_threshold=0.0)
    sb = setbased_filter(dataset)
    def rates(verdicts):
        pois = [v for v in verdicts if v.sample_id in poisoned_ids]
        clean = [v for v in verdicts if v.sample_id not in poisoned_ids]
        fr_p = np.mean([v.flagged for v in pois]) if pois else 0.0
        fr_c = np.mean([v.flagged for v in clean]) if clean else 0.0
        return float(fr_p), float(fr_c)
    sw_p, sw_c = rates(sw)
    sb_p, sb_c = rates(sb)
    out = {"samplewise": {"flag_rate_poisoned": sw_p, "flag_rate_clean": sw_c},
           "setbased": {"recall": sb_p, "fpr": sb_c}}
    ledger.append(config.experiment_id, chash, "defense", out)
    return out


def run_stealth(config: ExperimentConfig, ledger: Ledger,
                originals: Dataset, poisoned: Dataset,
                poisoned_ids: set[str]) -> list[dict]:
    chash = config.config_hash()
    rows = []
    for sid in sorted(poisoned_ids):
        o, p = originals.by_id(sid), poisoned.by_id(sid)
        rep = stealth_report(o.image, p.image, o.caption)
        rows.append({"id": sid, **rep.to_row()})
    ledger.append(config.experiment_id, chash, "stealth", {"rows": rows})
    return rows


def emit_report(ledger: Ledger, experiment_id: str, out_dir: str) -> list[str]:
    """CSV tables and static plots from the ledger rows, no recomputation."""
    rows = ledger.require_rows(experiment_id)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    ratio_rows = [r["payload"] for r in rows if r["stage"] == "ratio"]
    if ratio_rows:
        path = os.path.join(out_dir, f"{experiment_id}_ratios.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["ratio", "lir", "fae"])
            w.writeheader()
            for p in ratio_rows:
                w.writerow({k: p.get(k) for k in ("ratio", "lir", "fae")})
        written.append(path)
        written.append(_plot_ratio(ratio_rows, out_dir, experiment_id))

    stealth_rows = [r["payload"]["rows"] for r in rows if r["stage"] == "stealth"]
    if stealth_rows:
        path = os.path.join(out_dir, f"{experiment_id}_stealth.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["id", "psnr_db", "perceptual_dist",
                                              "img_img_align", "img_txt_align"])
            w.writeheader()
            for p in stealth_rows[-1]:
                w.writerow(p)
        written.append(path)

    sec_rows = [r["payload"] for r in rows if r["stage"] == "secondary"]
    if sec_rows:
        path = os.path.join(out_dir, f"{experiment_id}_secondary.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["lir_primary", "lir_secondary",
                                              "n_generated"])
            w.writeheader()
            for p in sec_rows:
                w.writerow(p)
        written.append(path)
        written.append(_plot_secondary(sec_rows, out_dir, experiment_id))

    eval_rows = [r["payload"] for r in rows if r["stage"] == "eval"]
    if eval_rows:
        path = os.path.join(out_dir, f"{experiment_id}_lir.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["run", "lir", "fae"])
            w.writeheader()
            for i, p in enumerate(eval_rows):
                w.writerow({"run": i, "lir": p["lir"], "fae": p.get("fae")})
        written.append(path)
    return written


def _plot_ratio(ratio_rows, out_dir, experiment_id) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    ratios = [p["ratio"] for p in ratio_rows]
    lirs = [p["lir"] for p in ratio_rows]
    faes = [p.get("fae") for p in ratio_rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(ratios, lirs, "o-")
    axes[0].set_xlabel("poisoning ratio")
    axes[0].set_ylabel("LIR")
    known = [(r, f) for r, f in zip(ratios, faes) if f is not None]
    if known:
        axes[1].plot([r for r, _ in known], [f for _, f in known], "s-")
    axes[1].set_xlabel("poisoning ratio")
    axes[1].set_ylabel("first-attack epoch")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{experiment_id}_ratio.png")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _plot_secondary(sec_rows, out_dir, experiment_id) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.scatter([p["lir_primary"] for p in sec_rows],
               [p["lir_secondary"] for p in sec_rows])
    ax.plot([0, 1], [0, 1], "k--", lw=0.5)
    ax.set_xlabel("primary LIR")
    ax.set_ylabel("secondary LIR")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{experiment_id}_secondary.png")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
