"""Drives the qsr binary through a tiny experiment.

Checks exit codes, byte-identical reruns across thread counts, the output
root override and the published JSON schemas.
"""

import argparse
import hashlib
import json
import os
import pathlib
import subprocess
import sys
import tempfile

import jsonschema

TINY = {
    "output_dir": "run",
    "precision": "double",
    "phantom": {"height": 8, "width": 8, "train_slices": 4, "val_slices": 2, "test_slices": 2},
    "scheme": {"directions": 15, "input_directions": 6},
    "model": {"patch": 4, "dim": 16, "depth": 1, "heads": 2, "seed": 3},
    "train": {"iterations": 6, "val_every": 3, "diffusion_steps": 50, "beta_max": 0.2, "val_items": 2, "seed": 2},
    "sampler": {"steps": 8, "lambda_oc": 0.3, "lambda_scc": 0.3, "jacobian": "fast", "seed": 4},
    "grid": {"oc": [0, 1], "scc": [0], "slices": 2},
}

failures = []


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


def sha(path):
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()


class Runner:
    def __init__(self, exe, cwd):
        self.exe = str(pathlib.Path(exe).resolve())
        self.cwd = cwd

    def __call__(self, *args, env=None):
        full_env = dict(os.environ)
        full_env.pop("QSR_OUTPUT_ROOT", None)
        full_env.pop("QSR_THREADS", None)
        full_env.update(env or {})
        p = subprocess.run([self.exe, *args], cwd=self.cwd, env=full_env, capture_output=True, text=True)
        return p.returncode, p.stderr


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--qsr", required=True)
    ap.add_argument("--schemas", required=True)
    opts = ap.parse_args()
    schemas = pathlib.Path(opts.schemas).resolve()
    report_schema = json.loads((schemas / "metric_report.schema.json").read_text())
    config_schema = json.loads((schemas / "experiment_config.schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(report_schema)
    jsonschema.Draft202012Validator.check_schema(config_schema)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        qsr = Runner(opts.qsr, tmp)
        (tmp / "tiny.json").write_text(json.dumps(TINY))
        jsonschema.validate(TINY, config_schema)
        check(True, "tiny config validates against the config schema")

        code, _ = qsr()
        check(code == 2, f"no subcommand exits 2 (got {code})")
        code, err = qsr("phantom", "--config", "tiny.json", "--set", "scheme.input_directions=40")
        check(code == 2 and "scheme.input_directions" in err, f"N_in > N_target exits 2 naming the field (got {code})")
        code, err = qsr("phantom", "--config", "tiny.json", "--set", "phantom.colour=1")
        check(code == 2 and "phantom.colour" in err, f"unknown field exits 2 naming it (got {code})")
        code, _ = qsr("phantom", "--config", "missing.json")
        check(code == 4, f"missing config exits 4 (got {code})")
        code, _ = qsr("train", "--config", "tiny.json", "--data", "nowhere")
        check(code == 4, f"missing dataset exits 4 (got {code})")

        code, err = qsr("phantom", "--config", "tiny.json")
        check(code == 0, "phantom succeeds " + err.strip()[-200:])
        code, _ = qsr("phantom", "--config", "tiny.json", "--out", "again")
        first = json.loads((tmp / "run/dataset/manifest.json").read_text())
        second = json.loads((tmp / "again/manifest.json").read_text())
        check(code == 0 and first["files"] == second["files"], "phantom rerun gives identical content hashes")
        check(len(first["files"]) == 6, "manifest lists six files")
        prov = json.loads((tmp / "run/dataset/provenance.json").read_text())
        jsonschema.validate(prov["config"], config_schema)
        check(True, "provenance config validates against the config schema")

        code, err = qsr("train", "--config", "tiny.json", "--threads", "1")
        check(code == 0, "train succeeds " + err.strip()[-200:])
        code, _ = qsr("train", "--config", "tiny.json", "--threads", "2", "--out", "train2")
        check(code == 0, "train with two threads succeeds")
        for name in ("loss.csv", "val.csv", "checkpoint_final.qsr", "checkpoint_best.qsr"):
            check(sha(tmp / "run/train" / name) == sha(tmp / "train2" / name), f"{name} identical across thread counts")

        code, _ = qsr("downsample", "--config", "tiny.json", "--input", "run/dataset/test.vol")
        check(code == 0, "downsample succeeds")
        code, err = qsr("super-resolve", "--config", "tiny.json", "--input", "run/lar/lar.vol")
        check(code == 0, "super-resolve succeeds " + err.strip()[-200:])
        code, _ = qsr("super-resolve", "--config", "tiny.json", "--input", "run/lar/lar.vol", "--out", "sr_again",
                      env={"QSR_THREADS": "2"})
        check(code == 0 and sha(tmp / "run/super_resolve/har.vol") == sha(tmp / "sr_again/har.vol"),
              "same seed gives the same output hash")
        code, _ = qsr("super-resolve", "--config", "tiny.json", "--input", "run/lar/lar.vol", "--no-guidance",
                      "--out", "sr_plain")
        check(code == 0 and sha(tmp / "run/super_resolve/har.vol") != sha(tmp / "sr_plain/har.vol"),
              "zero guidance weights change the output")
        code, err = qsr("super-resolve", "--config", "tiny.json", "--input", "run/lar/lar.vol", "--table",
                        "nowhere")
        check(code == 4, f"missing target table exits 4 (got {code})")
        sr_prov = json.loads((tmp / "run/super_resolve/provenance.json").read_text())
        check(sr_prov["config_sha256"] and sr_prov["inputs"]["checkpoint"]["sha256"] ==
              sha(tmp / "run/train/checkpoint_final.qsr") and sr_prov["seeds"]["sampler"] == 4,
              "super-resolve provenance records config hash, checkpoint hash and seed")

        code, err = qsr("eval", "--truth", "run/dataset/test.vol", "--recon", "run/super_resolve/har.vol",
                        "--observed", "run/lar/lar.vol", "--out", "eval_sr")
        check(code == 0, "eval succeeds " + err.strip()[-200:])
        report = json.loads((tmp / "eval_sr/report.json").read_text())
        jsonschema.validate(report, report_schema)
        check(True, "reconstruction report validates against the report schema")
        check(len(report["directions"]) == 9, "eval scores only the nine unobserved directions")

        code, _ = qsr("eval", "--truth", "run/dataset/test.vol", "--recon", "run/dataset/test.vol",
                      "--out", "eval_same")
        report = json.loads((tmp / "eval_same/report.json").read_text())
        jsonschema.validate(report, report_schema)
        check(code == 0 and report["dwi"]["psnr"] == "inf" and report["dti"]["fa"]["mae"] == 0,
              "identity report validates and carries the infinite PSNR sentinel")
        code, _ = qsr("eval", "--truth", "run/dataset/test.vol", "--recon", "run/lar/lar.vol", "--out", "eval_bad")
        check(code == 2, f"shape mismatch exits 2 (got {code})")

        code, _ = qsr("gridsearch", "--config", "tiny.json")
        check(code == 0 and (tmp / "run/gridsearch/selected_config.json").exists(), "gridsearch succeeds")
        jsonschema.validate(json.loads((tmp / "run/gridsearch/selected_config.json").read_text()), config_schema)

        code, _ = qsr("phantom", "--config", "tiny.json", env={"QSR_OUTPUT_ROOT": str(tmp / "root")})
        check(code == 0 and (tmp / "root/run/dataset/manifest.json").exists(), "QSR_OUTPUT_ROOT prefixes output_dir")

        for d in ("run/dataset", "run/train", "run/lar", "run/super_resolve", "eval_sr", "run/gridsearch"):
            check((tmp / d / "provenance.json").exists(), f"{d} holds provenance.json")

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
