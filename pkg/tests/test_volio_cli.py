import json
import subprocess
import sys

import numpy as np
import pytest

from voxdet.annotation import LabelMap
from voxdet.cli import cli_dispatch
from voxdet.errors import (
    DuplicateScanId,
    HeaderMismatch,
    MalformedBox,
    MissingField,
    TruncatedPayload,
    UnsupportedDtype,
)
from voxdet.geometry import Box3, VolumeMeta
from voxdet.volio import (
    BoxEntry,
    ScanBoxes,
    read_boxes,
    read_volume,
    write_boxes,
    write_volume,
)

from oracles import flood_fill_components


def make_map(grid, spacing=(5.0, 0.42, 0.42)):
    grid = np.asarray(grid, dtype=np.int64)
    return LabelMap(VolumeMeta(grid.shape, spacing), grid)


class TestVolumeFile:
    def test_zeros_roundtrip(self, tmp_path):
        path = tmp_path / "v.vox"
        write_volume(make_map(np.zeros((2, 2, 2))), path)
        lm = read_volume(path)
        assert lm.grid.shape == (2, 2, 2)
        assert not lm.grid.any()

    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(8)
        for dtype_max in (1, 200, 60000):
            grid = rng.integers(0, dtype_max + 1, size=(5, 7, 3))
            path = tmp_path / f"v{dtype_max}.vox"
            write_volume(make_map(grid), path)
            lm = read_volume(path)
            assert np.array_equal(lm.grid, grid)
            # writing the read map again produces identical bytes
            path2 = tmp_path / f"v{dtype_max}b.vox"
            write_volume(lm, path2)
            assert path.read_bytes() == path2.read_bytes()

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "v.vox"
        write_volume(make_map(np.zeros((2, 2, 2))), path)
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(TruncatedPayload):
            read_volume(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "v.vox"
        write_volume(make_map(np.zeros((2, 2, 2))), path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(HeaderMismatch):
            read_volume(path)

    def test_unsupported_dtype(self, tmp_path):
        path = tmp_path / "v.vox"
        header = {"shape": [1, 1, 1], "spacing_mm": [1, 1, 1],
                  "dtype": "f32", "order": "row-major z-major"}
        path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00" * 4)
        with pytest.raises(UnsupportedDtype):
            read_volume(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "v.vox"
        path.write_bytes(b"not json\n\x00")
        with pytest.raises(HeaderMismatch):
            read_volume(path)

    def test_missing_header_field(self, tmp_path):
        path = tmp_path / "v.vox"
        header = {"shape": [1, 1, 1], "dtype": "u8", "order": "row-major z-major"}
        path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00")
        with pytest.raises(HeaderMismatch):
            read_volume(path)

    def test_labels_above_u16_rejected(self, tmp_path):
        grid = np.zeros((1, 1, 1), dtype=np.int64)
        grid[0, 0, 0] = 70000
        with pytest.raises(UnsupportedDtype):
            write_volume(make_map(grid), tmp_path / "v.vox")


class TestBoxFile:
    def test_empty_roundtrip(self, tmp_path):
        path = tmp_path / "b.boxes"
        write_boxes(ScanBoxes("scan0", (5, 0.42, 0.42), []), path)
        scan = read_boxes(path)
        assert scan.scan_id == "scan0"
        assert scan.entries == []

    def test_degenerate_box_rejected(self, tmp_path):
        path = tmp_path / "b.boxes"
        doc = {"scan_id": "s", "spacing_mm": [1, 1, 1],
               "boxes": [{"box": [0, 0, 0, 0, 1, 1], "label": 0}]}
        path.write_text(json.dumps(doc))
        with pytest.raises(MalformedBox):
            read_boxes(path)

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "b.boxes"
        path.write_text(json.dumps({"scan_id": "s", "boxes": []}))
        with pytest.raises(MissingField):
            read_boxes(path)
        path.write_text(json.dumps({"scan_id": "s", "spacing_mm": [1, 1, 1],
                                    "boxes": [{"label": 1}]}))
        with pytest.raises(MissingField):
            read_boxes(path)

    def test_thousand_random_boxes_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        entries = []
        for i in range(1000):
            lo = rng.uniform(-50, 50, size=3)
            hi = lo + rng.uniform(1e-3, 40, size=3)
            score = float(rng.uniform()) if i % 2 else None
            entries.append(BoxEntry(Box3(tuple(lo), tuple(hi)),
                                    int(rng.integers(5)), score))
        path = tmp_path / "b.boxes"
        scan = ScanBoxes("rt", (5.0, 0.42, 0.42), entries)
        write_boxes(scan, path)
        again = read_boxes(path)
        assert again.scan_id == scan.scan_id
        assert again.spacing_mm == scan.spacing_mm
        assert again.entries == entries  # exact float equality

    def test_write_is_deterministic(self, tmp_path):
        entries = [BoxEntry(Box3((0, 0, 0), (1, 2, 3)), 1, 0.25)]
        a, b = tmp_path / "a.boxes", tmp_path / "b.boxes"
        write_boxes(ScanBoxes("s", (1, 1, 1), entries), a)
        write_boxes(ScanBoxes("s", (1, 1, 1), entries), b)
        assert a.read_bytes() == b.read_bytes()


def run_cli(args, capsys):
    code = cli_dispatch(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_scan(path, scan_id, boxes, scores=None, labels=None,
               spacing=(5.0, 0.42, 0.42)):
    entries = []
    for i, b in enumerate(boxes):
        entries.append(BoxEntry(
            Box3(tuple(b[:3]), tuple(b[3:])),
            labels[i] if labels else 0,
            scores[i] if scores else None,
        ))
    write_boxes(ScanBoxes(scan_id, spacing, entries), path)


class TestCli:
    def test_iou_subcommand(self, tmp_path, capsys):
        a = tmp_path / "a.boxes"
        b = tmp_path / "b.boxes"
        write_scan(a, "s", [(0, 0, 0, 2, 2, 2)])
        write_scan(b, "s", [(1, 1, 1, 3, 3, 3)])
        code, out, _ = run_cli(["iou", "--a", str(a), "--b", str(b),
                                "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(out)
        assert doc["pairs"][0]["iou"] == pytest.approx(1 / 15)

    def test_eval_identical_files_gives_perfect_scores(self, tmp_path, capsys):
        path = tmp_path / "p.boxes"
        rng = np.random.default_rng(10)
        boxes, scores = [], []
        for _ in range(6):
            lo = rng.uniform(0, 30, size=3)
            hi = lo + rng.uniform(1, 8, size=3)
            boxes.append(tuple(lo) + tuple(hi))
            scores.append(float(rng.uniform(0.1, 1.0)))
        write_scan(path, "s", boxes, scores=scores)
        code, out, _ = run_cli([
            "eval", "--pred", str(path), "--gt", str(path),
            "--iou", "0.1,0.3,0.9", "--format", "structured",
        ], capsys)
        assert code == 0
        doc = json.loads(out)
        for t in doc["thresholds"]:
            assert t["ap"] == 1.0
            assert t["ar"] == 1.0

    def test_eval_with_size_bins_and_froc(self, tmp_path, capsys):
        pred = tmp_path / "p.boxes"
        gt = tmp_path / "g.boxes"
        write_scan(pred, "s", [(0, 0, 0, 5, 10, 10), (20, 20, 20, 25, 40, 40)],
                   scores=[0.9, 0.7], spacing=(1, 1, 1))
        write_scan(gt, "s", [(0, 0, 0, 5, 10, 10), (20, 20, 20, 25, 40, 40)],
                   spacing=(1, 1, 1))
        code, out, _ = run_cli([
            "eval", "--pred", str(pred), "--gt", str(gt), "--iou", "0.3",
            "--size-bins", "1,10,50", "--froc", "--format", "structured",
        ], capsys)
        assert code == 0
        doc = json.loads(out)
        assert set(doc["size_groups_cm3"]) == {"<1", "1-10", "10-50", ">=50"}
        # 5*10*10 voxels at 1mm spacing = 0.5 cm^3; 5*20*20 = 2 cm^3
        assert doc["size_groups_cm3"]["<1"][0]["n_gt"] == 1
        assert doc["size_groups_cm3"]["1-10"][0]["n_gt"] == 1
        assert doc["froc"][0]["points"][0]["sensitivity"] == 1.0

    def test_froc_two_column_output(self, tmp_path, capsys):
        pred = tmp_path / "p.boxes"
        gt = tmp_path / "g.boxes"
        write_scan(pred, "s", [(0, 0, 0, 2, 2, 2)], scores=[0.9])
        write_scan(gt, "s", [(0, 0, 0, 2, 2, 2)])
        code, out, _ = run_cli(["froc", "--pred", str(pred), "--gt", str(gt),
                                "--iou", "0.1"], capsys)
        assert code == 0
        rows = [line.split("\t") for line in out.strip().splitlines()]
        assert all(len(r) == 2 for r in rows)
        assert float(rows[0][1]) == 1.0

    def test_noise_determinism_bytes(self, tmp_path, capsys):
        src = tmp_path / "in.boxes"
        rng = np.random.default_rng(11)
        boxes = []
        for _ in range(25):
            lo = rng.uniform(0, 50, size=3)
            hi = lo + rng.uniform(2, 10, size=3)
            boxes.append(tuple(lo) + tuple(hi))
        write_scan(src, "s", boxes)
        out1, out2 = tmp_path / "o1.boxes", tmp_path / "o2.boxes"
        code1, stdout1, _ = run_cli(["noise", "--boxes", str(src), "--mode",
                                     "shrink", "--magnitude", "0.1", "--seed",
                                     "7", "--out", str(out1)], capsys)
        code2, stdout2, _ = run_cli(["noise", "--boxes", str(src), "--mode",
                                     "shrink", "--magnitude", "0.1", "--seed",
                                     "7", "--out", str(out2)], capsys)
        assert code1 == code2 == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert stdout1 == stdout2
        # a different seed must actually change the output
        run_cli(["noise", "--boxes", str(src), "--mode", "shrink",
                 "--magnitude", "0.1", "--seed", "8", "--out", str(out2)],
                capsys)
        assert out1.read_bytes() != out2.read_bytes()

    def test_mask2boxes_matches_oracle(self, tmp_path, capsys):
        rng = np.random.default_rng(12)
        grid = (rng.random((10, 10, 10)) < 0.15).astype(np.int64)
        vol = tmp_path / "v.vox"
        write_volume(make_map(grid), vol)
        out = tmp_path / "comps.boxes"
        code, stdout, _ = run_cli([
            "mask2boxes", "--volume", str(vol), "--connectivity", "26",
            "--out", str(out), "--format", "structured",
        ], capsys)
        assert code == 0
        doc = json.loads(stdout)
        got = {(c["label"], tuple(c["box"]), c["voxel_count"])
               for c in doc["components"]}
        want = {(label, box, count)
                for label, box, count in flood_fill_components(grid, 26)}
        assert got == want
        assert len(read_boxes(out).entries) == len(want)

    def test_nms_subcommand(self, tmp_path, capsys):
        pred = tmp_path / "p.boxes"
        write_scan(pred, "s", [(0, 0, 0, 2, 2, 2), (0, 0, 0, 2, 2, 2),
                               (8, 8, 8, 9, 9, 9)],
                   scores=[0.8, 0.9, 0.5])
        out = tmp_path / "kept.boxes"
        code, stdout, _ = run_cli(["nms", "--pred", str(pred),
                                   "--iou-threshold", "0.5", "--out", str(out),
                                   "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(stdout)
        assert doc["kept"] == 2
        kept = read_boxes(out)
        assert [e.score for e in kept.entries] == [0.9, 0.5]

    def test_grad_check_subcommand(self, capsys):
        code, out, _ = run_cli(["grad-check", "--pairs", "25", "--seed", "3",
                                "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(out)
        by_loss = {r["loss"]: r for r in doc["results"]}
        assert by_loss["smooth_l1"]["max_rel_error"] < 1e-6
        assert by_loss["diou"]["max_rel_error"] < 1e-4
        assert by_loss["vciou"]["max_rel_error"] < 1e-4

    def test_loss_subcommand_with_params(self, tmp_path, capsys):
        pred = tmp_path / "pred.json"
        gt = tmp_path / "gt.json"
        pred.write_text(json.dumps([[0, 0, 0, 4, 2, 2]]))
        gt.write_text(json.dumps([[0, 0, 0, 2, 2, 2]]))
        code, out, _ = run_cli(["loss", "--pred-params", str(pred),
                                "--gt-params", str(gt), "--loss", "vciou",
                                "--grad", "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(out)
        assert doc["values"][0] == pytest.approx(0.51206, abs=1e-4)
        assert len(doc["gradients"][0]) == 6

    def test_anchors_gen_and_fit(self, tmp_path, capsys):
        cfg = tmp_path / "anchors.json"
        cfg.write_text(json.dumps({
            "scale_mode": "rescale",
            "shapes": [[1, 6, 6], [2, 10, 10]],
        }))
        code, out, _ = run_cli(["anchors", "gen", "--config", str(cfg),
                                "--shape", "8,64,64", "--spacing", "5,0.42,0.42",
                                "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(out)
        assert doc["levels"][0]["level"] == "P2"
        assert doc["total_anchors"] == sum(l["anchors"] for l in doc["levels"])

        corpus = tmp_path / "corpus.boxes"
        rng = np.random.default_rng(14)
        boxes = []
        for _ in range(30):
            lo = rng.uniform(0, 20, size=3)
            hi = lo + rng.uniform(1, 10, size=3)
            boxes.append(tuple(lo) + tuple(hi))
        write_scan(corpus, "s", boxes)
        fitted = tmp_path / "fitted.json"
        code, out, _ = run_cli(["anchors", "fit", "--boxes", str(corpus),
                                "--k", "3", "--out", str(fitted),
                                "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(out)
        assert len(doc["shapes_dhw"]) == 3
        assert 0 < doc["mean_best_iou"] <= 1
        # emitted config carries the stride schedule and feeds gen directly
        saved = json.loads(fitted.read_text())
        assert [l["level"] for l in saved["levels"]] == ["P2", "P3", "P4",
                                                         "P5", "P6"]
        code, out, _ = run_cli(["anchors", "gen", "--config", str(fitted),
                                "--shape", "8,64,64", "--spacing",
                                "5,0.42,0.42", "--format", "structured"],
                               capsys)
        assert code == 0

    def test_match_subcommand(self, tmp_path, capsys):
        cfg = tmp_path / "anchors.json"
        cfg.write_text(json.dumps({
            "scale_mode": "fixed",
            "shapes": [[2, 8, 8]],
            "levels": [{"level": "P2", "stride": [1, 4, 4]}],
        }))
        gt = tmp_path / "g.boxes"
        write_scan(gt, "s", [(2, 8, 8, 4, 16, 16)], spacing=(5, 0.42, 0.42))
        code, out, _ = run_cli(["match", "--config", str(cfg), "--shape",
                                "8,32,32", "--gt", str(gt),
                                "--format", "structured"], capsys)
        assert code == 0
        doc = json.loads(out)
        assert doc["per_gt"][0]["candidates"] > 0

    def test_domain_error_exit_code(self, tmp_path, capsys):
        missing = tmp_path / "nope.boxes"
        doc = {"scan_id": "s", "spacing_mm": [1, 1, 1],
               "boxes": [{"box": [0, 0, 0, 0, 1, 1]}]}
        missing.write_text(json.dumps(doc))
        code, _, err = run_cli(["iou", "--a", str(missing), "--b",
                                str(missing)], capsys)
        assert code == 1
        assert "error:" in err

    def test_missing_file_is_a_domain_error(self, tmp_path, capsys):
        code, _, err = run_cli(["iou", "--a", str(tmp_path / "absent.boxes"),
                                "--b", str(tmp_path / "absent.boxes")], capsys)
        assert code == 1
        assert "absent.boxes" in err

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            cli_dispatch(["eval", "--nonsense"])
        assert exc.value.code == 2

    def test_duplicate_scan_rejected(self, tmp_path, capsys):
        a = tmp_path / "a.boxes"
        b = tmp_path / "b.boxes"
        write_scan(a, "same", [(0, 0, 0, 1, 1, 1)], scores=[0.5])
        write_scan(b, "same", [(0, 0, 0, 1, 1, 1)], scores=[0.5])
        g = tmp_path / "g.boxes"
        write_scan(g, "same", [(0, 0, 0, 1, 1, 1)])
        code, _, err = run_cli(["eval", "--pred", str(a), str(b),
                                "--gt", str(g)], capsys)
        assert code == 1
        assert "same" in err

    def test_module_entry_point(self, tmp_path):
        a = tmp_path / "a.boxes"
        write_scan(a, "s", [(0, 0, 0, 2, 2, 2)])
        proc = subprocess.run(
            [sys.executable, "-m", "voxdet", "iou", "--a", str(a), "--b",
             str(a), "--format", "structured"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert json.loads(proc.stdout)["mean_iou"] == 1.0
