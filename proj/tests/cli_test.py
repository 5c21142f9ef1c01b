"""End-to-end checks of the sil command line: exit codes, schemas, determinism."""

import argparse
import json
import os
import re
import struct
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

try:
    import jsonschema
    from referencing import Registry, Resource
except ImportError:
    print("jsonschema not available, skipping")
    sys.exit(77)

SIL = None
ROOT = None

SMALL_SPEC = {
    "scene": {"height": 10, "width": 10, "min_entities": 3, "max_entities": 3, "min_box": 4, "max_box": 5},
    "train": {"epochs": 2, "train_scenes": 3, "eval_scenes": 3, "ks": [5, 20]},
    "sil": {"stages": [{"centers_x": 3, "centers_y": 3, "layers": 1, "heads": 2, "head_dim": 4, "mlp_hidden": 8}]},
}
SMALL_CONFIG = {"stages": [{"centers_x": 2, "centers_y": 2, "layers": 1, "heads": 1, "head_dim": 3, "mlp_hidden": 6}]}


def run(*args, env=None):
    e = dict(os.environ)
    e.update(env or {})
    return subprocess.run([SIL, *map(str, args)], capture_output=True, text=True, env=e)


def write_grid(path, h, w, d, values, version=1, magic=b"SILT"):
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<4I", version, h, w, d))
        f.write(struct.pack("<%df" % len(values), *values))


def read_grid(path):
    data = Path(path).read_bytes()
    assert data[:4] == b"SILT"
    _, h, w, d = struct.unpack("<4I", data[4:20])
    return h, w, d, data[20:]


def read_params(path):
    data = Path(path).read_bytes()
    assert data[:4] == b"SILP"
    _, count = struct.unpack("<2I", data[4:12])
    at, manifest = 12, []
    for _ in range(count):
        (n,) = struct.unpack("<I", data[at:at + 4])
        name = data[at + 4:at + 4 + n].decode()
        rows, cols = struct.unpack("<2I", data[at + 4 + n:at + 12 + n])
        manifest.append((name, rows, cols))
        at += 12 + n
    return data[:at], manifest, bytearray(data[at:])


def schema_validator(name):
    schemas = {}
    for p in (ROOT / "docs" / "schemas").glob("*.schema.json"):
        doc = json.loads(p.read_text())
        schemas[doc["$id"]] = Resource.from_contents(doc)
    registry = Registry().with_resources(schemas.items())
    schema = json.loads((ROOT / "docs" / "schemas" / name).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    return jsonschema.Draft202012Validator(schema, registry=registry)


class CliTest(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self._tmp.name)
        self.grid = self.dir / "g.silt"
        vals = [((i * 37) % 101) / 50.0 - 1.0 for i in range(8 * 8 * 3)]
        write_grid(self.grid, 8, 8, 3, vals)
        self.boxes = self.dir / "boxes.json"
        self.boxes.write_text(json.dumps([{"x1": 0, "y1": 0, "x2": 4, "y2": 4, "label": "a"},
                                          {"x1": 3, "y1": 2, "x2": 8, "y2": 7}]))
        self.config = self.dir / "config.json"
        self.config.write_text(json.dumps(SMALL_CONFIG))
        self.spec = self.dir / "spec.json"
        self.spec.write_text(json.dumps(SMALL_SPEC))

    def tearDown(self):
        self._tmp.cleanup()

    def assertExit(self, proc, code):
        self.assertEqual(proc.returncode, code, proc.stdout + proc.stderr)

    def assertNoStrayFiles(self, *expected):
        self.assertEqual(sorted(p.name for p in self.dir.iterdir()), sorted(expected))

    # cluster

    def cluster(self, tag, *extra):
        return run("cluster", "--input", self.grid, "--centers", "2x2", "--seed", 5,
                   "--out-labels", self.dir / f"{tag}.pgm", "--out-overlay", self.dir / f"{tag}.ppm",
                   "--out-stats", self.dir / f"{tag}.json", *extra)

    def test_cluster_outputs_are_valid_and_repeatable(self):
        self.assertExit(self.cluster("a"), 0)
        self.assertExit(self.cluster("b"), 0)
        for ext in ("pgm", "ppm", "json"):
            self.assertEqual((self.dir / f"a.{ext}").read_bytes(), (self.dir / f"b.{ext}").read_bytes(), ext)
        stats = json.loads((self.dir / "a.json").read_text())
        schema_validator("cluster_stats.schema.json").validate(stats)
        self.assertEqual(sum(stats["cluster_sizes"]), 64)
        self.assertEqual(stats["seed"], 5)
        pgm = (self.dir / "a.pgm").read_text().split()
        self.assertEqual(pgm[0], "P2")
        self.assertTrue((self.dir / "a.ppm").read_text().startswith("P3"))

    def test_cluster_uniform_gray_image_is_one_cluster(self):
        img = self.dir / "gray.pgm"
        img.write_text("P2\n6 6\n255\n" + " ".join(["128"] * 36) + "\n")
        out = self.dir / "labels.pgm"
        self.assertExit(run("cluster", "--input", img, "--centers", "2x2", "--out-labels", out), 0)
        tokens = [t for line in out.read_text().splitlines() if not line.startswith("#") for t in line.split()]
        self.assertEqual(tokens[:4], ["P2", "6", "6", "3"])
        self.assertEqual(set(tokens[4:]), {"0"})

    def test_cluster_rejects_bad_inputs(self):
        self.assertExit(run("cluster", "--input", self.dir / "missing.silt"), 2)
        self.assertExit(run("cluster", "--input", self.grid, "--centers", "0x2"), 2)
        self.assertExit(run("cluster", "--input", self.grid, "--centers", "banana"), 2)
        self.assertExit(run("cluster", "--input", self.grid, "--nk", "65"), 2)

    # corrupted grid headers

    def test_corrupt_grids_exit_with_format_error(self):
        good = self.grid.read_bytes()
        cases = {
            "magic": b"XXXX" + good[4:],
            "version": good[:4] + struct.pack("<I", 2) + good[8:],
            "zero": good[:8] + struct.pack("<I", 0) + good[12:],
            "short": good[:-4],
            "long": good + b"\0",
            "header": good[:14],
        }
        for name, data in cases.items():
            p = self.dir / f"{name}.silt"
            p.write_bytes(data)
            proc = run("cluster", "--input", p, "--out-stats", self.dir / "s.json")
            self.assertExit(proc, 3)
            self.assertIn("offset", proc.stderr, name)
            self.assertFalse((self.dir / "s.json").exists())
        proc = run("cluster", "--input", self.dir / "magic.silt", "--out-stats", self.dir / "s.json")
        self.assertIn("offset 0", proc.stderr)

    # forward

    def forward(self, tag, *extra):
        return run("forward", "--grid", self.grid, "--boxes", self.boxes, "--config", self.config,
                   "--out", self.dir / f"{tag}.silt", "--diag", self.dir / f"{tag}.json", *extra)

    def test_forward_outputs_are_valid_and_repeatable(self):
        self.assertExit(self.forward("a", "--init-seed", 3, "--save-params", self.dir / "p.silp"), 0)
        self.assertExit(self.forward("b", "--init-seed", 3), 0)
        self.assertExit(self.forward("c", "--params", self.dir / "p.silp"), 0)
        a = (self.dir / "a.silt").read_bytes()
        self.assertEqual(a, (self.dir / "b.silt").read_bytes())
        self.assertEqual(a, (self.dir / "c.silt").read_bytes())
        self.assertEqual((self.dir / "a.json").read_bytes(), (self.dir / "c.json").read_bytes())
        self.assertNotEqual(a, self.grid.read_bytes())
        diag = json.loads((self.dir / "a.json").read_text())
        schema_validator("forward_diag.schema.json").validate(diag)
        self.assertEqual(len(diag["stages"][0]["assignment"]), 64)
        for w in diag["stages"][0]["weights"]:
            if w:
                self.assertAlmostEqual(sum(w), 1.0, places=6)

    def test_forward_with_zero_dispatch_is_identity(self):
        self.assertExit(self.forward("a", "--init-seed", 3, "--save-params", self.dir / "p.silp"), 0)
        head, manifest, payload = read_params(self.dir / "p.silp")
        at = 0
        for name, rows, cols in manifest:
            n = 4 * rows * cols
            if ".h_dd." in name:
                payload[at:at + n] = bytes(n)
            at += n
        self.assertEqual(at, len(payload))
        (self.dir / "zero.silp").write_bytes(head + payload)
        self.assertExit(self.forward("z", "--params", self.dir / "zero.silp"), 0)
        self.assertEqual(read_grid(self.dir / "z.silt"), read_grid(self.grid))

    def test_forward_rejects_bad_inputs(self):
        self.assertExit(self.forward("x"), 2)
        self.assertExit(self.forward("x", "--init-seed", 1, "--params", self.dir / "p.silp"), 2)
        self.boxes.write_text('[{"x1": 3, "y1": 0, "x2": 1, "y2": 2}]')
        self.assertExit(self.forward("x", "--init-seed", 1), 3)
        self.boxes.write_text('[{"x1": 0, "y1": 0, "x2": 1, "y2": 2, "g": [1, 2]}]')
        self.assertExit(self.forward("x", "--init-seed", 1), 3)
        self.boxes.write_text("[]")
        self.config.write_text('{"stages": [{"centres": 2}]}')
        self.assertExit(self.forward("x", "--init-seed", 1), 3)
        self.config.write_text('{"embed_dim": 256}')
        self.assertExit(self.forward("x", "--init-seed", 1), 2)
        (self.dir / "bad.silp").write_bytes(b"SILP" + bytes(4))
        self.config.write_text(json.dumps(SMALL_CONFIG))
        self.assertExit(self.forward("x", "--params", self.dir / "bad.silp"), 3)
        self.assertFalse((self.dir / "x.silt").exists())

    def test_forward_overflow_is_numeric_error(self):
        self.assertExit(self.forward("a", "--init-seed", 3, "--save-params", self.dir / "p.silp"), 0)
        head, manifest, payload = read_params(self.dir / "p.silp")
        big = struct.pack("<f", 3e38)
        payload[:] = big * (len(payload) // 4)
        (self.dir / "big.silp").write_bytes(head + payload)
        self.assertExit(self.forward("o", "--params", self.dir / "big.silp"), 4)
        self.assertFalse((self.dir / "o.silt").exists())

    # toy-bench and ablate

    def test_toy_bench_json_and_csv(self):
        for tag in ("a", "b"):
            self.assertExit(run("toy-bench", "--spec", self.spec, "--pipeline", "sil", "--seeds", "1,2",
                                "--out", self.dir / f"{tag}.json"), 0)
        self.assertEqual((self.dir / "a.json").read_bytes(), (self.dir / "b.json").read_bytes())
        out = json.loads((self.dir / "a.json").read_text())
        schema_validator("toy_bench.schema.json").validate(out)
        self.assertEqual([r["seed"] for r in out["runs"]], [1, 2])
        self.assertExit(run("toy-bench", "--spec", self.spec, "--pipeline", "boxmean", "--seeds", "1",
                            "--out", self.dir / "c.csv"), 0)
        lines = (self.dir / "c.csv").read_text().splitlines()
        self.assertTrue(lines[0].startswith("pipeline,seed,k,mean_recall,recall,"))
        self.assertEqual(len(lines[0].split(",")), 9)
        self.assertExit(run("toy-bench", "--spec", self.spec, "--pipeline", "other", "--out", self.dir / "d.json"), 2)
        self.assertExit(run("toy-bench", "--spec", self.spec, "--seeds", "1,x", "--out", self.dir / "d.json"), 2)

    def test_ablate_is_deterministic(self):
        for tag in ("a", "b"):
            self.assertExit(run("ablate", "--axis", "depth", "--spec", self.spec, "--seeds", "1,2",
                                "--values", "0,1", "--out", self.dir / f"{tag}.csv"), 0)
        a = (self.dir / "a.csv").read_text()
        self.assertEqual(a, (self.dir / "b.csv").read_text())
        self.assertEqual(a.splitlines()[0], "axis,value,centers,layers,k,median_mean_recall,seed_1,seed_2")
        self.assertEqual(len(a.splitlines()), 5)
        self.assertExit(run("ablate", "--axis", "width", "--spec", self.spec, "--out", self.dir / "c.csv"), 2)
        self.assertExit(run("ablate", "--axis", "centers", "--values", "5", "--spec", self.spec,
                            "--out", self.dir / "c.csv"), 2)

    def test_thread_count_does_not_change_results(self):
        for tag, threads in (("one", "1"), ("four", "4")):
            self.assertExit(run("toy-bench", "--spec", self.spec, "--seeds", "3", "--out", self.dir / f"{tag}.json",
                                env={"SIL_THREADS": threads}), 0)
        self.assertEqual((self.dir / "one.json").read_bytes(), (self.dir / "four.json").read_bytes())
        self.assertExit(run("gradcheck", env={"SIL_THREADS": "0"}), 2)
        self.assertExit(run("gradcheck", env={"SIL_THREADS": "many"}), 2)

    # gradcheck

    def test_gradcheck_reference_case(self):
        proc = run("gradcheck", "--size", "6x6x4", "--centers", "2x2", "--entities", 2, "--seed", 7)
        self.assertExit(proc, 0)
        m = re.search(r"max relative error (\S+)", proc.stdout)
        self.assertIsNotNone(m, proc.stdout)
        self.assertLess(float(m.group(1)), 1e-5)
        self.assertExit(run("gradcheck", "--size", "6x6"), 2)

    # usage

    def test_usage_errors(self):
        self.assertExit(run(), 2)
        self.assertExit(run("frobnicate"), 2)
        self.assertExit(run("cluster"), 2)
        self.assertExit(run("--help"), 0)

    def test_committed_files_match_schemas(self):
        spec = json.loads((ROOT / "configs" / "marker_task.json").read_text())
        schema_validator("bench_spec.schema.json").validate(spec)
        self.assertEqual(spec["seeds"], [1, 2, 3, 4, 5])
        schema_validator("boxes.schema.json").validate(json.loads(self.boxes.read_text()))
        schema_validator("sil_config.schema.json").validate(SMALL_CONFIG)

    def test_outputs_leave_no_temporaries(self):
        self.assertExit(self.cluster("a"), 0)
        self.assertNoStrayFiles("g.silt", "boxes.json", "config.json", "spec.json", "a.pgm", "a.ppm", "a.json")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--sil", required=True)
    parser.add_argument("--root", required=True)
    args, rest = parser.parse_known_args()
    SIL = args.sil
    ROOT = Path(args.root)
    unittest.main(argv=[sys.argv[0], *rest], verbosity=2)
