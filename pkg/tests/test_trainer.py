import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import torch

from gradcheck import TINY, TINY_DATA
from promptseg.data import DatasetManifest, generate_synthetic_sample, split_dataset
from promptseg.losses import prompt_totals
from promptseg.metrics import MetricReport, evaluate_dataset
from promptseg.model import init_model, load_checkpoint
from promptseg.trainer import (
    CHECKPOINT_NAME, TrainConfig, TrainingDivergedError, compare_models, evaluate_model, relative_improvement, train,
)


def toy(count=4):
    samples = [generate_synthetic_sample(TINY_DATA, i) for i in range(count)]
    return samples


def all_train(samples):
    return DatasetManifest("toy", 0, [(s.case_id, "train") for s in samples])


@pytest.fixture(scope="module")
def split20():
    samples = toy(20)
    return samples, split_dataset([s.case_id for s in samples], seed=1)


def test_one_epoch_decreases_loss():
    samples = toy()
    _, rec = train(init_model(TINY, 0), TrainConfig(epochs=1, batch_size=4, learning_rate=1e-2), samples,
                   all_train(samples))
    assert rec.final_train_loss < rec.initial_train_loss
    assert len(rec.epochs) == 1 and rec.best_epoch == 0


def test_deterministic(split20, tmp_path):
    samples, manifest = split20
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=3e-3, seed=4)
    a, ra = train(init_model(TINY, 0), cfg, samples, manifest)
    b, rb = train(init_model(TINY, 0), cfg, samples, manifest)
    assert ra == rb
    sa, sb = a.state_dict(), b.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert ra.to_csv() == rb.to_csv()
    assert ra.to_csv().splitlines()[0] == "epoch,train_loss,val_dsc_organ,val_dsc_lesion"
    assert len(ra.epochs) == 3 and 0 <= ra.best_epoch < 3


def test_single_lesion_mode_prompts_only_lesion(split20):
    samples, manifest = split20
    seen = []

    def hook(epoch, batch, logits, targets):
        seen.append(([lg.shape[0] for lg in logits], targets))

    organs = {s.case_id: s.masks["organ"].copy() for s in samples}
    _, rec = train(init_model(TINY, 0), TrainConfig(mode="single:lesion", epochs=1, batch_size=4), samples, manifest,
                   step_hook=hook)
    by_bytes = {s.masks["lesion"].tobytes() for s in samples}
    for counts, targets in seen:
        assert set(counts) == {1}
        assert all(t[0].tobytes() in by_bytes for t in targets)
    assert all(np.array_equal(organs[s.case_id], s.masks["organ"]) for s in samples)
    assert rec.roles == ("lesion",)
    assert set(rec.epochs[0].val_dsc) == {"lesion"}


def test_cotrain_steps_zero_gradient_off_selection(split20):
    samples, manifest = split20
    checked = []

    def hook(epoch, batch, logits, targets):
        for lg, tg in zip(logits, targets):
            _, _, total = prompt_totals(lg.detach(), tg)
            sel = int(torch.argmax(total))
            for i in range(lg.shape[0]):
                if i != sel:
                    assert torch.count_nonzero(lg.grad[i]) == 0
            assert torch.count_nonzero(lg.grad[sel]) > 0
            checked.append(sel)

    train(init_model(TINY, 0), TrainConfig(epochs=2, batch_size=4), samples, manifest, step_hook=hook)
    assert len(checked) == 2 * len(manifest.ids("train"))


def test_frozen_groups_unchanged(split20):
    samples, manifest = split20
    m0 = init_model(TINY, 0)
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2, freeze_prompt_encoder=True)
    trained, _ = train(m0, cfg, samples, manifest)
    for group in ("encoder", "prompt_encoder"):
        a, b = m0.group_parameters(group), trained.group_parameters(group)
        assert all(torch.equal(a[k], b[k]) for k in a)


def test_unfrozen_encoder_trains_without_cache(split20):
    samples, manifest = split20
    m0 = init_model(TINY, 0)
    trained, _ = train(m0, TrainConfig(epochs=1, batch_size=4, learning_rate=1e-2, freeze_encoder=False),
                       samples, manifest)
    assert not torch.equal(m0.encoder.patch_embed.weight, trained.encoder.patch_embed.weight)


def test_train_errors(split20):
    samples, manifest = split20
    with pytest.raises(ValueError):
        train(init_model(TINY, 0), TrainConfig(epochs=0), samples, manifest)
    with pytest.raises(ValueError):
        train(init_model(TINY, 0), TrainConfig(mode="both"), samples, manifest)
    with pytest.raises(ValueError):
        train(init_model(TINY, 0), TrainConfig(), samples, DatasetManifest("e", 0, [(samples[0].case_id, "test")]))


def test_nan_loss_aborts_with_batch_file(split20, tmp_path):
    samples, manifest = split20
    model = init_model(TINY, 0)
    with torch.no_grad():
        model.decoder.mask_token.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as exc:
        train(model, TrainConfig(epochs=1, checkpoint_dir=str(tmp_path)), samples, manifest)
    assert exc.value.epoch == 0 and exc.value.batch == 0 and exc.value.case_ids
    text = (tmp_path / "nan_batch.txt").read_text()
    assert "cases=" + " ".join(exc.value.case_ids) in text


def test_checkpoint_then_evaluate_bit_exact(split20, tmp_path):
    samples, manifest = split20
    model, _ = train(init_model(TINY, 0), TrainConfig(epochs=2, batch_size=4, checkpoint_dir=str(tmp_path)),
                     samples, manifest)
    test = [s for s in samples if s.case_id in set(manifest.ids("test"))]
    direct = evaluate_model(model, test)
    reloaded = evaluate_model(load_checkpoint(tmp_path / CHECKPOINT_NAME), test)
    assert direct.to_csv() == reloaded.to_csv()
    assert direct == evaluate_model(model, test)
    assert (tmp_path / "embeddings").is_dir()
    with pytest.raises(ValueError):
        evaluate_model(model, [])


def test_oracle_predictor_scores_one(split20):
    samples, _ = split20
    refs = [(s.case_id, r, s.masks[r]) for s in samples for r in ("organ", "lesion")]
    rep = evaluate_dataset(refs, refs, tau=1.0)
    for role in ("organ", "lesion"):
        assert rep.mean(role, "iou") == rep.mean(role, "dsc") == rep.mean(role, "nsd") == 1.0
        assert rep.mean(role, "assd") == 0.0


@pytest.mark.parametrize("base, new, lower, expect, bound", [
    (50.12, 65.74, False, 31.17, 31), (63.41, 77.98, False, 22.98, 23), (7.760, 3.981, True, 48.70, 48),
])
def test_relative_improvement_reported_values(base, new, lower, expect, bound):
    r = relative_improvement(base, new, lower)
    assert round(r, 2) == expect
    assert abs(math.trunc(r) - bound) <= 1 and abs(round(r) - bound) <= 1


def test_relative_improvement_errors():
    assert relative_improvement(2.0, 3.0) == 50.0
    assert relative_improvement(2.0, 1.0, lower_is_better=True) == 50.0
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            relative_improvement(bad, 1.0)


def _report(seed, roles=("organ", "lesion")):
    rng = np.random.default_rng(seed)
    preds, refs = [], []
    for i in range(5):
        for r in roles:
            ref = (rng.random((12, 12)) < 0.4).astype(np.uint8)
            ref[5, 5] = 1
            pred = ref.copy()
            pred[rng.random((12, 12)) < 0.1] ^= 1
            refs.append((f"c{i}", r, ref))
            preds.append((f"c{i}", r, pred))
    return evaluate_dataset(preds, refs, 1.0), refs


def test_compare_identical_reports_zero_improvement():
    rep, _ = _report(0)
    cmp = compare_models({"b": rep, "a": rep})
    assert cmp.arms == ["a", "b"] and cmp.roles == ["lesion", "organ"]
    assert cmp.improvements and all(v == 0.0 for v in cmp.improvements.values())


def test_compare_outputs_deterministic_and_ordered(tmp_path):
    r1, refs = _report(1)
    r2, _ = _report(2)
    oracle = evaluate_dataset(refs, refs, 1.0)
    c1 = compare_models({"zeta": r1, "alpha": oracle})
    c2 = compare_models({"alpha": oracle, "zeta": r1})
    assert c1.to_csv() == c2.to_csv() and c1.to_svg() == c2.to_svg()
    rows = c1.to_csv().splitlines()
    assert rows[0] == "kind,arm,reference_arm,role,metric,value"
    means = [r.split(",") for r in rows[1:] if r.startswith("mean,")]
    assert [m[1] for m in means] == sorted(m[1] for m in means)
    imp = c1.improvements[("zeta", "alpha", "lesion", "dsc")]
    assert imp > 0  # the oracle beats a noisy predictor
    root = ET.fromstring(c1.to_svg())
    assert root.tag.endswith("svg") and len(root.findall("{http://www.w3.org/2000/svg}rect")) > 0
    c1.write(tmp_path)
    assert (tmp_path / "comparison.csv").read_text() == c1.to_csv()
    ET.parse(tmp_path / "comparison.svg")
    with pytest.raises(ValueError):
        compare_models({"a": r1, "b": MetricReport(r2.cases[:-1])})
    with pytest.raises(ValueError):
        compare_models({})


def test_compare_single_role_arms():
    both, _ = _report(0)
    lesion_only = MetricReport([c for c in both.cases if c.role == "lesion"])
    cmp = compare_models({"cotrain": both, "single:lesion": lesion_only})
    assert ("single:lesion", "organ", "dsc") not in cmp.means
    assert ("cotrain", "single:lesion", "lesion", "dsc") in cmp.improvements
    assert ("cotrain", "single:lesion", "organ", "dsc") not in cmp.improvements
