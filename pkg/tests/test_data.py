import itertools
import json

import numpy as np
import pytest

from bntext.data import (
    EMPTY_ID,
    Dataset,
    EmbedderSpec,
    PatientRecord,
    build_dataset,
    default_embedder,
    load_external,
    read_embeddings,
    record_from_json,
    rng_for,
    synth_embed,
    write_dataset,
    write_embeddings,
)
from bntext.discrete import sample_columns
from bntext.domain import SYMPTOMS, default_ground_truth
from bntext.evaluation import roc_auc


@pytest.fixture(scope="module")
def sim():
    return build_dataset(default_ground_truth(), default_embedder(8), 4000, 1000, seed=0)


class TestBuildDataset:
    def test_split_sizes(self, sim):
        assert len(sim.train) == 4000 and len(sim.test) == 1000
        sizes = [len(sim.split[k]) for k in ("symptoms_masked", "text_masked", "full")]
        assert sizes == [1333, 1333, 1334]
        assert sorted(itertools.chain(*sim.split.values())) == list(range(4000))

    def test_masking_groups(self, sim):
        recs = sim.train.records
        for i in sim.split["symptoms_masked"]:
            r = recs[i]
            assert all(getattr(r, s) is None for s in SYMPTOMS)
            assert r.text_present and None not in (r.season, r.pneu, r.inf)
        for i in sim.split["text_masked"]:
            assert not recs[i].text_present and recs[i].embedding is None
            assert recs[i].symptoms_observed
        for i in sim.split["full"]:
            assert recs[i].text_present and recs[i].symptoms_observed

    def test_test_set_fully_observed(self, sim):
        assert all(r.text_present and r.symptoms_observed for r in sim.test.records)

    def test_masking_preserves_unmasked_values(self, sim):
        cols = sample_columns(default_ground_truth(), 4000, rng_for(0, "data.train"))
        for i, r in enumerate(sim.train.records):
            for name in ("season", "pneu", "inf", "fever", "pain") + SYMPTOMS:
                v = getattr(r, name)
                assert v is None or v == cols[name][i]

    def test_records_validate(self, sim):
        for r in sim.train.records + sim.test.records:
            r.validate()

    def test_remainder_goes_to_full_group(self):
        small = build_dataset(default_ground_truth(), default_embedder(4), 11, 2, seed=3)
        assert [len(small.split[k]) for k in ("symptoms_masked", "text_masked", "full")] == [3, 3, 5]

    def test_same_seed_byte_identical_files(self, tmp_path):
        for run in ("a", "b"):
            s = build_dataset(default_ground_truth(), default_embedder(4), 300, 100, seed=7)
            write_dataset(s.train, tmp_path / f"{run}.jsonl")
            write_embeddings([s.train, s.test], tmp_path / f"{run}.emb.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.emb.jsonl").read_bytes() == (tmp_path / "b.emb.jsonl").read_bytes()

    def test_different_seed_differs(self):
        a = build_dataset(default_ground_truth(), default_embedder(4), 300, 10, seed=1)
        b = build_dataset(default_ground_truth(), default_embedder(4), 300, 10, seed=2)
        assert a.split != b.split

    def test_bnpp_variant_only_adds_fever_and_pain(self, sim, tmp_path):
        write_dataset(sim.test, tmp_path / "std.jsonl")
        write_dataset(sim.test, tmp_path / "pp.jsonl", bnpp=True)
        std = [json.loads(l) for l in (tmp_path / "std.jsonl").read_text().splitlines()]
        pp = [json.loads(l) for l in (tmp_path / "pp.jsonl").read_text().splitlines()]
        for a, b in zip(std, pp):
            assert set(b) - set(a) == {"fever", "pain"}
            assert {k: b[k] for k in a} == a

    def test_standard_view_drops_hidden_symptoms(self, sim):
        std = sim.test.standard()
        assert all(r.fever is None and r.pain is None for r in std.records)
        assert [r.dysp for r in std.records] == [r.dysp for r in sim.test.records]


class TestGroundTruth:
    def test_sampled_frequencies_match_cpts(self):
        gt = default_ground_truth()
        n = 100_000
        cols = sample_columns(gt, n, np.random.default_rng(99))
        for name in gt.names:
            cpt = gt.cpts[name]
            cards = [gt.spec(p).card for p in cpt.parents]
            for row, cfg in enumerate(itertools.product(*(range(c) for c in cards))):
                sel = np.ones(n, dtype=bool)
                for p, v in zip(cpt.parents, cfg):
                    sel &= cols[p] == v
                m = int(sel.sum())
                assert m > 0
                for level, prob in enumerate(cpt.table[row]):
                    freq = np.mean(cols[name][sel] == level)
                    assert abs(freq - prob) <= 3 * np.sqrt(prob * (1 - prob) / m), (name, cfg, level)

    def test_pneumonia_is_rare(self):
        gt = default_ground_truth()
        p = gt.cpts["season"].table[0] @ gt.cpts["pneu"].table[:, 1]
        assert 0.005 <= p <= 0.02


class TestSynthEmbed:
    def test_no_text_gives_empty_vector(self):
        emb = default_embedder(6)
        x = synth_embed(emb, dict.fromkeys(("dysp", "cough", "fever", "pain", "nasal"), 1), False,
                        np.random.default_rng(0))
        np.testing.assert_array_equal(x, emb.empty_text)

    def test_noise_free_single_symptom(self):
        emb = default_embedder(6, sigma=0.0, distractor_scale=0.0)
        state = {"dysp": 0, "cough": 1, "fever": 0, "pain": 0, "nasal": 0}
        x = synth_embed(emb, state, True, np.random.default_rng(0))
        np.testing.assert_array_equal(x, emb.prototypes[("cough", 1)] + emb.base)

    def test_deterministic_per_stream(self):
        emb = default_embedder(6)
        state = {"dysp": 1, "cough": 1, "fever": 2, "pain": 0, "nasal": 0}
        a = synth_embed(emb, state, True, rng_for(0, "embed", 5))
        b = synth_embed(emb, state, True, rng_for(0, "embed", 5))
        np.testing.assert_array_equal(a, b)

    def test_linear_probe_recovers_fever(self):
        gt = default_ground_truth()
        emb = default_embedder(32)
        rng = np.random.default_rng(1)
        cols = sample_columns(gt, 3000, rng)
        names = ("dysp", "cough", "fever", "pain", "nasal")
        x = np.stack([synth_embed(emb, {k: cols[k][i] for k in names}, True, rng)
                      for i in range(3000)])
        y = (cols["fever"] > 0).astype(float)
        design = np.column_stack([x, np.ones(len(x))])
        w, *_ = np.linalg.lstsq(design[:2000], y[:2000], rcond=None)
        assert roc_auc(design[2000:] @ w, y[2000:]) > 0.95

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            EmbedderSpec(kind="synthetic", d=3, empty_text=np.zeros(2))
        with pytest.raises(ValueError):
            EmbedderSpec(kind="bogus")


class TestExternalFiles:
    def test_round_trip(self, sim, tmp_path):
        sub = sim.train.subset(range(60))
        write_dataset(sub, tmp_path / "d.jsonl")
        write_embeddings([sub], tmp_path / "e.jsonl")
        back = load_external(tmp_path / "d.jsonl", tmp_path / "e.jsonl")
        np.testing.assert_array_equal(back.empty_text, sub.empty_text)
        for a, b in zip(sub.standard().records, back.records):
            assert (a.id, a.season, a.pneu, a.inf, a.dysp, a.cough, a.nasal, a.text_present) == \
                   (b.id, b.season, b.pneu, b.inf, b.dysp, b.cough, b.nasal, b.text_present)
            if a.text_present:
                np.testing.assert_array_equal(a.embedding, b.embedding)

    def test_bnpp_round_trip_keeps_fever(self, sim, tmp_path):
        sub = sim.test.subset(range(20))
        write_dataset(sub, tmp_path / "d.jsonl", bnpp=True)
        write_embeddings([sub], tmp_path / "e.jsonl")
        back = load_external(tmp_path / "d.jsonl", tmp_path / "e.jsonl")
        assert [r.fever for r in back.records] == [r.fever for r in sub.records]

    def test_embedding_for_textless_record_rejected(self, tmp_path):
        rec = {"id": 1, "season": "warm", "pneu": 0, "inf": 1, "dysp": 0, "cough": 1,
               "nasal": 0, "text_present": False}
        (tmp_path / "d.jsonl").write_text(json.dumps(rec) + "\n")
        (tmp_path / "e.jsonl").write_text(
            json.dumps({"id": EMPTY_ID, "vec": [0, 0]}) + "\n" + json.dumps({"id": 1, "vec": [1, 2]}) + "\n")
        with pytest.raises(ValueError, match="text_present=false"):
            load_external(tmp_path / "d.jsonl", tmp_path / "e.jsonl")

    def test_missing_id_and_dimension(self, tmp_path):
        rec = {"id": 1, "season": "cold", "pneu": 0, "inf": 1, "dysp": None, "cough": None,
               "nasal": None, "text_present": True}
        (tmp_path / "d.jsonl").write_text(json.dumps(rec) + "\n")
        (tmp_path / "e.jsonl").write_text(json.dumps({"id": EMPTY_ID, "vec": [0, 0]}) + "\n")
        with pytest.raises(ValueError, match="no embedding for record 1"):
            load_external(tmp_path / "d.jsonl", tmp_path / "e.jsonl")
        with open(tmp_path / "e.jsonl", "a") as fh:
            fh.write(json.dumps({"id": 1, "vec": [1, 2, 3]}) + "\n")
        with pytest.raises(ValueError, match="dimension"):
            load_external(tmp_path / "d.jsonl", tmp_path / "e.jsonl")

    def test_missing_empty_entry(self, tmp_path):
        (tmp_path / "d.jsonl").write_text("")
        (tmp_path / "e.jsonl").write_text(json.dumps({"id": 3, "vec": [0]}) + "\n")
        with pytest.raises(ValueError, match=EMPTY_ID):
            load_external(tmp_path / "d.jsonl", tmp_path / "e.jsonl")

    def test_file_embedder_missing_id_or_empty(self):
        spec = EmbedderSpec(kind="file", table={EMPTY_ID: np.zeros(2)})
        with pytest.raises(KeyError, match="id 0"):
            build_dataset(default_ground_truth(), spec, 3, 1)
        table = {i: np.ones(2) for i in range(4)}
        with pytest.raises(KeyError, match=EMPTY_ID):
            build_dataset(default_ground_truth(), EmbedderSpec(kind="file", table=table), 3, 1)

    def test_duplicate_embedding_ids(self, tmp_path):
        line = json.dumps({"id": 2, "vec": [0]}) + "\n"
        (tmp_path / "e.jsonl").write_text(line + line)
        with pytest.raises(ValueError, match="duplicate"):
            read_embeddings(tmp_path / "e.jsonl")

    def test_partial_symptoms_rejected(self):
        doc = {"id": 0, "season": "warm", "pneu": 0, "inf": 0, "dysp": 1, "cough": None,
               "nasal": None, "text_present": False}
        with pytest.raises(ValueError, match="all-or-none"):
            record_from_json(doc).validate()

    def test_unknown_season_label(self):
        doc = {"id": 0, "season": "spring", "pneu": 0, "inf": 0, "text_present": False}
        with pytest.raises(ValueError):
            record_from_json(doc)


def test_dataset_embeddings_substitute_empty_text():
    empty = np.array([9.0, 9.0])
    recs = [PatientRecord(0, 0, 0, 0, text_present=False),
            PatientRecord(1, 1, 0, 0, embedding=np.array([1.0, 2.0]))]
    np.testing.assert_array_equal(Dataset(recs, empty).embeddings(), [[9, 9], [1, 2]])
