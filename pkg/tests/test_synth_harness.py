import numpy as np
import pytest

from app.core.exceptions import ConfigError, TraceError
from app.core.tensor import Tensor
from app.models.config import SceneSpec, TrainConfig
from app.services.context_trace import (
    attention_ranks,
    export_context_trace,
    read_trace,
    write_trace,
)
from app.services.detector import DetectionHead, DetectorModel, detection_head
from app.services.evaluation import eval_recall, local_peaks, recall_from_maps
from app.services.synth_data import (
    ObjectAssignment,
    SceneObject,
    SynthScene,
    assign_objects,
    benchmark_scenes,
    gen_scene,
    make_targets,
    peak_cell,
)
from app.services.trainer import METRICS_HEADER, SGDMomentum, Trainer, make_batch, train_step


STRIDES = (4, 8, 16, 32)


def parameter_vector(model):
    return np.concatenate([p.data.ravel() for p in model.parameters()])


def recall_oracle(maps, assignments, threshold, radius):
    """Cell-by-cell search for a strict-threshold 8-neighbourhood maximum near each object."""
    found = total = 0
    for per_scene, objects in zip(maps, assignments):
        for obj in objects:
            total += 1
            grid = per_scene[obj.level]
            H, W = grid.shape
            hit = False
            for r in range(H):
                for c in range(W):
                    if max(abs(r - obj.row), abs(c - obj.col)) > radius or not grid[r, c] > threshold:
                        continue
                    neighbours = [
                        grid[rr, cc]
                        for rr in range(r - 1, r + 2)
                        for cc in range(c - 1, c + 2)
                        if (rr, cc) != (r, c) and 0 <= rr < H and 0 <= cc < W
                    ]
                    hit = hit or all(grid[r, c] >= v for v in neighbours)
            found += hit
    return found / total if total else 1.0


def blank_scene(objects, size=64):
    return SynthScene(image=Tensor(np.zeros((1, 3, size, size))), objects=objects, seed=0)


@pytest.mark.unit
class TestSceneGeneration:
    def test_same_seed_same_bits(self):
        spec = SceneSpec()
        assert gen_scene(7, spec).image.data.tobytes() == gen_scene(7, spec).image.data.tobytes()

    def test_different_seeds_differ(self):
        spec = SceneSpec()
        assert not np.array_equal(gen_scene(1, spec).image.data, gen_scene(2, spec).image.data)

    def test_zero_objects(self):
        scene = gen_scene(3, SceneSpec(min_objects=0, max_objects=0))
        assert scene.objects == []
        assert scene.image.shape == (1, 3, 64, 64)
        assert abs(scene.image.data.mean() - 0.5) < 0.05

    def test_objects_inside_image(self):
        spec = SceneSpec(max_objects=5)
        for scene in benchmark_scenes(spec, 50):
            for obj in scene.objects:
                radius = obj.size_px / 2.0
                assert radius <= obj.cx <= spec.image_size - radius
                assert radius <= obj.cy <= spec.image_size - radius
                assert spec.band_for(obj.size_px) is not None

    @pytest.mark.slow
    def test_band_proportions(self):
        spec = SceneSpec()
        counts = np.zeros(len(spec.bands))
        for scene in benchmark_scenes(spec, 1000):
            for obj in scene.objects:
                counts[spec.bands.index(spec.band_for(obj.size_px))] += 1
        np.testing.assert_allclose(counts / counts.sum(), 0.25, atol=0.05)

    def test_benchmark_is_seed_range(self):
        scenes = benchmark_scenes(SceneSpec(), 4, first_seed=10)
        assert [scene.seed for scene in scenes] == [10, 11, 12, 13]


@pytest.mark.unit
class TestTargets:
    def test_peak_cell_rounds_and_clamps(self):
        assert peak_cell(20.3, 4, 16) == 5
        assert peak_cell(63.9, 4, 16) == 15
        assert peak_cell(0.0, 32, 2) == 0

    def test_single_object_heatmap(self):
        scene = blank_scene([SceneObject(cx=20.3, cy=9.9, size_px=8.0, class_id=0)])
        targets = make_targets(scene, SceneSpec())
        assert [t.heatmap.shape for t in targets] == [(1, 1, 16, 16), (1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2)]
        assert targets[0].peaks == [(2, 5)]
        assert targets[0].heatmap[0, 0, 2, 5] == 1.0
        assert targets[0].heatmap.max() == 1.0
        assert all(not np.any(t.heatmap) for t in targets[1:])

    def test_overlapping_objects_take_maximum(self):
        objects = [SceneObject(20.0, 20.0, 20.0, 0), SceneObject(28.0, 20.0, 20.0, 1)]
        heatmap = make_targets(blank_scene(objects), SceneSpec())[2].heatmap[0, 0]
        assert heatmap.max() == 1.0
        assert np.all(heatmap <= 1.0)

    def test_size_outside_bands(self):
        with pytest.raises(ConfigError):
            assign_objects(blank_scene([SceneObject(30.0, 30.0, 50.0, 0)]), SceneSpec())

    def test_assignment_levels(self):
        objects = [SceneObject(32.0, 32.0, size, 0) for size in (8.0, 15.0, 25.0, 40.0)]
        assert [a.level for a in assign_objects(blank_scene(objects), SceneSpec())] == [0, 1, 2, 3]


@pytest.mark.unit
class TestRecall:
    def test_local_peaks(self):
        grid = np.zeros((5, 5))
        grid[1, 1], grid[3, 4], grid[2, 2] = 0.9, 0.8, 0.4
        assert sorted(map(tuple, local_peaks(grid, 0.5))) == [(1, 1), (3, 4)]

    def test_peak_within_radius(self):
        grid = np.zeros((8, 8))
        grid[2, 3] = 0.9
        target = [[ObjectAssignment(level=0, stride=4, row=2, col=4)]]
        assert recall_from_maps([[grid]], target, 0.5, 1) == 1.0
        assert recall_from_maps([[grid]], target, 0.5, 0) == 0.0
        assert recall_from_maps([[grid]], target, 0.95, 1) == 0.0

    def test_no_objects_is_full_recall(self):
        assert recall_from_maps([[np.zeros((4, 4))]], [[]], 0.5, 1) == 1.0

    def test_targets_as_maps_recall_everything(self):
        spec = SceneSpec()
        scenes = benchmark_scenes(spec, 6)
        maps = [[t.heatmap[0, 0] for t in make_targets(scene, spec)] for scene in scenes]
        assignments = [assign_objects(scene, spec) for scene in scenes]
        assert recall_from_maps(maps, assignments, 0.5, 0) == 1.0
        zeros = [[np.zeros_like(level) for level in per_scene] for per_scene in maps]
        assert recall_from_maps(zeros, assignments, 0.5, 1) == 0.0

    def test_partial_recall(self):
        grid = np.zeros((8, 8))
        grid[6, 6] = 0.7
        target = [[ObjectAssignment(0, 4, 6, 6), ObjectAssignment(0, 4, 0, 0)]]
        assert recall_from_maps([[grid]], target, 0.5, 1) == 0.5


@pytest.mark.integration
class TestDetectorAndTraining:
    def test_zero_head_scores_half(self, desk_config, scenes):
        model = DetectorModel(desk_config, zero_head=True)
        maps = model.score_maps(Tensor(np.concatenate([s.image.data for s in scenes[:2]])))
        assert [m.shape for m in maps] == [(2, 1, 16, 16), (2, 1, 8, 8), (2, 1, 4, 4), (2, 1, 2, 2)]
        assert all(np.all(m == 0.5) for m in maps)
        assert eval_recall(model, scenes, 0.5, 1) == 0.0

    def test_detection_head_maps_per_level(self, desk_config, scenes):
        model = DetectorModel(desk_config)
        levels = model.features(scenes[0].image)
        maps = detection_head(levels, DetectionHead(32, 8, np.random.default_rng(0)))
        assert [m.shape for m in maps] == [(1, 1, 16, 16), (1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2)]
        assert all(np.all((m.data >= 0.0) & (m.data <= 1.0)) for m in maps)

    def test_zero_learning_rate_leaves_parameters(self, scenes, run_config):
        model = DetectorModel(run_config(learning_rate=0.0))
        before = {name: p.data.copy() for name, p in model.named_parameters()}
        optimizer = SGDMomentum(model.parameters(), 0.0)
        loss = train_step(model, optimizer, make_batch(model, scenes[:2]))
        assert np.isfinite(loss)
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[name], err_msg=name)

    def test_momentum_update(self, desk_config, scenes):
        model = DetectorModel(desk_config)
        optimizer = SGDMomentum(model.parameters(), 0.1, 0.5)
        param = model.head.score.bias
        start = param.data.copy()
        train_step(model, optimizer, make_batch(model, scenes[:2]))
        first_grad = optimizer.velocity[optimizer.params.index(param)].copy()
        np.testing.assert_allclose(param.data, start - 0.1 * first_grad, atol=1e-15)

    def test_same_seed_same_losses(self, scenes, run_config):
        first = Trainer(DetectorModel(run_config()), scenes).fit()
        second = Trainer(DetectorModel(run_config()), scenes).fit()
        assert first.losses == second.losses
        assert first.recalls == second.recalls

    def test_first_step_loss_equal_with_and_without_tcc(self, scenes, run_config):
        tcc_loss = Trainer(DetectorModel(run_config("tcc")), scenes).fit(steps=1).losses[0]
        none_loss = Trainer(DetectorModel(run_config("none")), scenes).fit(steps=1).losses[0]
        assert tcc_loss == none_loss

    def test_metrics_rows(self, scenes, output_dir, run_config):
        path = output_dir / "metrics.csv"
        Trainer(DetectorModel(run_config(steps=3, eval_interval=2)), scenes).fit(metrics_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert [line.split(",")[0] for line in lines[1:]] == ["2", "3"]

    def test_zero_steps_writes_header_only(self, scenes, output_dir, run_config):
        path = output_dir / "metrics.csv"
        result = Trainer(DetectorModel(run_config()), scenes, TrainConfig(steps=0)).fit(metrics_path=path)
        assert result.losses == []
        assert path.read_text() == METRICS_HEADER + "\n"


@pytest.mark.integration
class TestContextTrace:
    def test_rank_order(self):
        assert attention_ranks(np.array([0.1, 0.5, 0.1, 0.3])).tolist() == [3, 1, 4, 2]

    def test_records_for_every_round(self, desk_config, scenes):
        records = export_context_trace(DetectorModel(desk_config), scenes[0])
        assert len(records) == 4 * 2 * 2
        for record in records:
            assert len(record.keys) == desk_config.tcc.n_keys
            assert sum(entry.source == "local" for entry in record.attention) == 1
            assert sorted(entry.rank for entry in record.attention) == list(range(1, 6))
            assert sum(entry.weight for entry in record.attention) == pytest.approx(1.0, abs=1e-12)
            assert all(0 <= key.x_px < 64 and 0 <= key.y_px < 64 for key in record.keys)

    def test_deepest_only(self, desk_config, scenes):
        records = export_context_trace(DetectorModel(desk_config), scenes[0], deepest_only=True)
        assert len(records) == 1
        assert (records[0].level, records[0].placement, records[0].stack) == (3, "after_fusion", 1)

    def test_explicit_query_cell(self, desk_config, scenes):
        records = export_context_trace(DetectorModel(desk_config), scenes[0], query_cells={0: (3, 5)})
        level0 = [r for r in records if r.level == 0]
        assert all(r.query_cell == (3, 5) and r.query_px == (22, 14) for r in level0)

    def test_query_cell_out_of_range(self, desk_config, scenes):
        with pytest.raises(TraceError):
            export_context_trace(DetectorModel(desk_config), scenes[0], query_cells={3: (5, 0)})

    def test_needs_tcc(self, scenes, run_config):
        with pytest.raises(TraceError):
            export_context_trace(DetectorModel(run_config("conv3x3")), scenes[0])

    def test_jsonl_roundtrip(self, desk_config, scenes, output_dir):
        records = export_context_trace(DetectorModel(desk_config), scenes[1])
        path = write_trace(output_dir / "trace.jsonl", records)
        assert len(path.read_text().splitlines()) == len(records)
        assert read_trace(path) == records


@pytest.mark.unit
class TestRecallAtThresholdEdge:
    def test_peak_equal_to_threshold_is_not_a_detection(self):
        grid = np.zeros((4, 4))
        target = [[ObjectAssignment(level=0, stride=4, row=1, col=1)]]
        grid[1, 1] = 0.99
        assert recall_from_maps([[grid]], target, 0.99, 0) == 0.0
        grid[1, 1] = np.nextafter(0.99, 1.0)
        assert recall_from_maps([[grid]], target, 0.99, 0) == 1.0

    @pytest.mark.parametrize("seed", range(20))
    def test_eval_recall_matches_brute_force(self, mocker, seed):
        spec = SceneSpec()
        scenes = benchmark_scenes(spec, 8)
        gen = np.random.default_rng(seed)
        level_maps = [gen.choice([0.98, 0.99, 0.995, 1.0], size=(8, 1, 64 // s, 64 // s)) for s in STRIDES]
        model = mocker.Mock(strides=STRIDES)
        model.score_maps.return_value = level_maps

        recall = eval_recall(model, scenes, 0.99, 1, spec=spec)

        assignments = [assign_objects(scene, spec, STRIDES) for scene in scenes]
        per_scene = [[level[index, 0] for level in level_maps] for index in range(len(scenes))]
        assert recall == recall_oracle(per_scene, assignments, 0.99, 1)


@pytest.mark.unit
class TestGradientClipping:
    def test_large_gradients_are_rescaled(self, desk_config, scenes):
        model = DetectorModel(desk_config)
        optimizer = SGDMomentum(model.parameters(), 1.0, momentum=0.0, grad_clip_norm=1e-3)
        before = parameter_vector(model)
        train_step(model, optimizer, make_batch(model, scenes[:2]))
        assert optimizer.last_grad_norm > 1e-3
        assert np.linalg.norm(parameter_vector(model) - before) == pytest.approx(1e-3, rel=1e-6)

    def test_small_gradients_pass_through(self, desk_config, scenes):
        clipped, plain = DetectorModel(desk_config), DetectorModel(desk_config)
        batch = make_batch(plain, scenes[:2])
        train_step(clipped, SGDMomentum(clipped.parameters(), 0.05, 0.9, grad_clip_norm=1e9), batch)
        train_step(plain, SGDMomentum(plain.parameters(), 0.05, 0.9), batch)
        np.testing.assert_array_equal(parameter_vector(clipped), parameter_vector(plain))

    def test_trainer_uses_configured_bound(self, scenes, run_config):
        trainer = Trainer(DetectorModel(run_config(grad_clip_norm=0.25)), scenes)
        assert trainer.optimizer.grad_clip_norm == 0.25

    def test_tcc_updates_stay_within_bound(self, scenes, run_config):
        config = run_config(steps=25)
        cfg = config.train
        model = DetectorModel(config)
        optimizer = SGDMomentum(model.parameters(), cfg.learning_rate, cfg.momentum, cfg.grad_clip_norm)
        reach = 0.0
        for step in range(cfg.steps):
            reach = cfg.momentum * reach + cfg.grad_clip_norm
            start = 2 * step % len(scenes)
            before = parameter_vector(model)
            loss = train_step(model, optimizer, make_batch(model, scenes[start:start + 2]))
            assert np.isfinite(loss)
            assert np.linalg.norm(parameter_vector(model) - before) <= cfg.learning_rate * reach * (1 + 1e-9)


@pytest.mark.unit
class TestAblationTraining:
    @pytest.mark.parametrize("mode", ["local_only", "no_transformer"])
    def test_first_step_matches_unrefined(self, scenes, run_config, mode):
        ablation = Trainer(DetectorModel(run_config("tcc", mode)), scenes).fit(steps=2)
        none_loss = Trainer(DetectorModel(run_config("none")), scenes).fit(steps=1).losses[0]
        assert ablation.losses[0] == none_loss
        assert all(np.isfinite(loss) for loss in ablation.losses)


@pytest.mark.integration
class TestTraceAgainstDecode:
    def test_exported_weights_match_recorded_attention(self, desk_config, scenes):
        model = DetectorModel(desk_config)
        rounds = []
        model(scenes[0].image, recorder=rounds)
        records = export_context_trace(model, scenes[0])
        assert len(records) == len(rounds) == 16
        for record, round_ in zip(records, rounds):
            assert (record.level, record.placement, record.stack) == (round_.level, round_.placement, round_.stack)
            row, col = record.query_cell
            weights = round_.attention.data[0, row * round_.context.local_rep.shape[3] + col]
            for entry in record.attention:
                assert entry.weight == weights[0 if entry.source == "local" else entry.key_index + 1]

    def test_attention_listed_by_descending_weight(self, desk_config, scenes):
        for record in export_context_trace(DetectorModel(desk_config), scenes[0]):
            weights = [entry.weight for entry in record.attention]
            assert weights == sorted(weights, reverse=True)
            assert [entry.rank for entry in record.attention] == list(range(1, 6))

    def test_no_transformer_weights_are_uniform(self, scenes, run_config):
        records = export_context_trace(DetectorModel(run_config("tcc", "no_transformer")), scenes[0])
        assert all(entry.weight == 0.2 for record in records for entry in record.attention)

    def test_local_only_has_nothing_to_trace(self, scenes, run_config):
        with pytest.raises(TraceError):
            export_context_trace(DetectorModel(run_config("tcc", "local_only")), scenes[0])
