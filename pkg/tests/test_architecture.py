"""Architecture registry: definitions, weight enumeration, inference, fallback."""

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from modelmerge.architecture import (
    LAYER,
    POST,
    PRE,
    ArchitectureDef,
    TemplateEntry,
    WeightInfo,
    builtin_defs,
    enumerate_weights,
    flat_weights,
    infer_architecture,
    layer_count,
    load_architecture_defs,
)
from modelmerge.errors import FormatError, UnknownArchitecture

TOY = {
    "family": "toy",
    "num_layers_key": "n_layer",
    "pre_weights": ["embed.weight"],
    "layer_templates": ["h.{idx}.attn.weight", "h.{idx}.mlp.weight"],
    "post_weights": ["final_norm.weight"],
}


def write_def(directory, doc, name="toy.json"):
    path = directory / name
    path.write_text(json.dumps(doc))
    return path


def toy_def(tmp_path) -> ArchitectureDef:
    write_def(tmp_path, TOY)
    return load_architecture_defs(tmp_path)["toy"]


class TestDefinitions:
    def test_builtin_families(self):
        defs = builtin_defs()
        assert "llama" in defs and "mistral" in defs
        llama = defs["llama"]
        assert llama.num_layers_key == "num_hidden_layers"
        assert any("{idx}" in e.name for e in llama.layer_templates)

    def test_load_directory(self, tmp_path):
        write_def(tmp_path, TOY)
        defs = load_architecture_defs(tmp_path)
        assert list(defs) == ["toy"]
        assert defs["toy"].layer_templates == (
            TemplateEntry("h.{idx}.attn.weight"),
            TemplateEntry("h.{idx}.mlp.weight"),
        )

    def test_empty_directory_gives_empty_registry(self, tmp_path):
        assert load_architecture_defs(tmp_path) == {}

    def test_duplicate_family_rejected(self, tmp_path):
        write_def(tmp_path, TOY, "a.json")
        write_def(tmp_path, TOY, "b.json")
        with pytest.raises(FormatError, match="duplicate architecture family"):
            load_architecture_defs(tmp_path)

    def test_optional_entries(self, tmp_path):
        doc = dict(TOY)
        doc["post_weights"] = [{"name": "lm_head.weight", "optional": True}]
        write_def(tmp_path, doc)
        adef = load_architecture_defs(tmp_path)["toy"]
        assert adef.post_weights == (TemplateEntry("lm_head.weight", optional=True),)

    @pytest.mark.parametrize(
        "mutate,match",
        [
            (lambda d: d.pop("family"), "family"),
            (lambda d: d.pop("num_layers_key"), "num_layers_key"),
            (lambda d: d.pop("layer_templates"), "layer_templates"),
            (lambda d: d.update(layer_templates=[]), "empty"),
            (lambda d: d.update(layer_templates=["no.placeholder"]), "idx"),
            (lambda d: d.update(pre_weights=["bad.{idx}"]), "idx"),
            (lambda d: d.update(extra_key=1), "unknown key"),
            (
                lambda d: d.update(pre_weights=[{"name": "x", "optional": "yes"}]),
                "boolean",
            ),
            (
                lambda d: d.update(pre_weights=["embed.weight", "embed.weight"]),
                "duplicate",
            ),
        ],
    )
    def test_malformed_definition(self, tmp_path, mutate, match):
        doc = json.loads(json.dumps(TOY))
        mutate(doc)
        write_def(tmp_path, doc)
        with pytest.raises(FormatError, match=match):
            load_architecture_defs(tmp_path)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{nope")
        with pytest.raises(FormatError, match="invalid architecture definition"):
            load_architecture_defs(tmp_path)

    def test_non_object_document(self, tmp_path):
        (tmp_path / "bad.json").write_text("[1]")
        with pytest.raises(FormatError, match="JSON object"):
            load_architecture_defs(tmp_path)


class TestEnumeration:
    def test_counting(self, tmp_path):
        # 1 pre + 2 templates * 3 layers + 1 post = 8 weights.
        weights = enumerate_weights(toy_def(tmp_path), 3)
        assert len(weights) == 8
        assert [w.name for w in weights] == [
            "embed.weight",
            "h.0.attn.weight",
            "h.0.mlp.weight",
            "h.1.attn.weight",
            "h.1.mlp.weight",
            "h.2.attn.weight",
            "h.2.mlp.weight",
            "final_norm.weight",
        ]

    def test_kinds_and_layer_indices(self, tmp_path):
        weights = enumerate_weights(toy_def(tmp_path), 2)
        assert weights[0] == WeightInfo("embed.weight", PRE)
        assert weights[1] == WeightInfo("h.0.attn.weight", LAYER, layer_index=0)
        assert weights[4] == WeightInfo("h.1.mlp.weight", LAYER, layer_index=1)
        # Post weights sit at the deep end of the stack for gradients.
        assert weights[-1] == WeightInfo("final_norm.weight", POST, layer_index=1)

    def test_llama_two_layers(self):
        weights = enumerate_weights(builtin_defs()["llama"], 2)
        names = {w.name for w in weights}
        assert "model.layers.1.self_attn.q_proj.weight" in names
        assert "model.embed_tokens.weight" in names
        optional = {w.name for w in weights if w.optional}
        assert "lm_head.weight" in optional
        assert "model.layers.0.self_attn.rotary_emb.inv_freq" in optional

    def test_single_layer(self, tmp_path):
        weights = enumerate_weights(toy_def(tmp_path), 1)
        assert len(weights) == 4
        assert weights[-1].layer_index == 0

    def test_zero_layers_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            enumerate_weights(toy_def(tmp_path), 0)

    def test_expanded_name_collision_rejected(self, tmp_path):
        doc = {
            "family": "clash",
            "num_layers_key": "n",
            "pre_weights": ["h.0.w"],
            "layer_templates": ["h.{idx}.w"],
        }
        write_def(tmp_path, doc)
        adef = load_architecture_defs(tmp_path)["clash"]
        with pytest.raises(FormatError, match="collide"):
            enumerate_weights(adef, 1)

    @given(num_layers=st.integers(1, 12))
    def test_count_formula_and_uniqueness(self, num_layers):
        adef = builtin_defs()["llama"]
        weights = enumerate_weights(adef, num_layers)
        expected = (
            len(adef.pre_weights)
            + num_layers * len(adef.layer_templates)
            + len(adef.post_weights)
        )
        assert len(weights) == expected
        assert len({w.name for w in weights}) == len(weights)


class TestInference:
    def test_known_family(self, tmp_path):
        defs = {"toy": toy_def(tmp_path)}
        adef, n = infer_architecture({"model_type": "toy", "n_layer": 5}, defs)
        assert adef.family == "toy" and n == 5

    def test_missing_model_type(self):
        with pytest.raises(UnknownArchitecture, match="no model_type"):
            infer_architecture({}, builtin_defs())

    def test_unknown_family(self):
        with pytest.raises(UnknownArchitecture, match="gptzz"):
            infer_architecture({"model_type": "gptzz"}, builtin_defs())

    def test_missing_layer_count(self, tmp_path):
        with pytest.raises(FormatError, match="n_layer"):
            infer_architecture({"model_type": "toy"}, {"toy": toy_def(tmp_path)})

    @pytest.mark.parametrize("bad", [0, -3, "12", True, 1.5])
    def test_invalid_layer_count(self, tmp_path, bad):
        with pytest.raises(FormatError):
            layer_count(toy_def(tmp_path), {"n_layer": bad})


class TestFlatFallback:
    def test_intersection_in_first_input_order(self):
        kept, skipped = flat_weights([["c", "a", "b"], ["b", "c", "x"]])
        assert [w.name for w in kept] == ["c", "b"]
        assert all(w.kind == PRE and w.layer_index is None for w in kept)
        assert skipped == ["a", "x"]

    def test_identical_inputs_keep_everything(self):
        kept, skipped = flat_weights([["a", "b"], ["a", "b"]])
        assert [w.name for w in kept] == ["a", "b"]
        assert skipped == []

    def test_empty(self):
        assert flat_weights([]) == ([], [])

    @given(
        lists=st.lists(
            st.lists(st.sampled_from("abcdef"), unique=True, min_size=1),
            min_size=1,
            max_size=4,
        )
    )
    def test_kept_plus_skipped_covers_all_names(self, lists):
        kept, skipped = flat_weights(lists)
        kept_names = {w.name for w in kept}
        assert kept_names | set(skipped) == {n for ns in lists for n in ns}
        assert kept_names.isdisjoint(skipped)
        for names in lists:
            assert kept_names <= set(names)
