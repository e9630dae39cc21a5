"""One test per acceptance criterion, each at its stated tolerance.

Every test logs a PASS/FAIL/SKIP line; the lines are repeated in the
"acceptance criteria" section at the end of the pytest run.
"""

import json
import os
import random
import re
import socket
import time
import urllib.request
from pathlib import Path

import numpy as np
import pytest

from breathcheck import bench, cli, data_path, dataset, head, images, ops
from breathcheck import cfg as C
from breathcheck.head import BBox, Detection
from breathcheck.model import Model
from breathcheck.verify import client
from breathcheck.weights import BN_EPSILON, fold_batchnorm, read_weights

from conftest import (
    PUBLISHED_TINY_BYTES, PUBLISHED_YOLOV3_BYTES, TINY_CFG, YOLOV3_CFG, network_enabled, published_weights,
)
from oracles import batchnorm_f64, conv_f64, greedy_nms_literal, random_conv_case, rel_err
from walks import liveness_steps, walk

MB = 1_000_000
TINY_WEIGHTS_URL = "https://pjreddie.com/media/files/yolov3-tiny.weights"
DOG_URL = "https://raw.githubusercontent.com/pjreddie/darknet/master/data/dog.jpg"
DOG_CLASSES = {"dog", "bicycle", "truck", "car"}


def cli_run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------- 1: sizes


def test_criterion_1_model_sizes(capsys, criterion):
    with criterion("1a", "inspect reports weights sizes within 5% of 250 MB / 35 MB") as rec:
        t0 = time.perf_counter()
        sizes = {}
        for path, claimed in ((YOLOV3_CFG, 250 * MB), (TINY_CFG, 35 * MB)):
            code, out, _ = cli_run(capsys, "inspect", path)
            assert code == 0
            size = int(re.search(r"expected weights bytes: (\d+)", out).group(1))
            sizes[path.name] = (size, abs(size - claimed) / claimed)
        assert sizes["yolov3.cfg"][0] == PUBLISHED_YOLOV3_BYTES
        assert sizes["yolov3-tiny.cfg"][0] == PUBLISHED_TINY_BYTES
        assert all(dev <= 0.05 for _, dev in sizes.values()), sizes
        assert time.perf_counter() - t0 < 10
        rec.detail = ", ".join(f"{k}: {v[0]:,} B ({v[1]:.1%} off)" for k, v in sizes.items())


@pytest.mark.parametrize("name, cfg_path", [("yolov3", YOLOV3_CFG), ("yolov3-tiny", TINY_CFG)])
def test_criterion_1_published_files(criterion, name, cfg_path):
    with criterion(f"1b[{name}]", "read_weights consumes the published file with zero trailing bytes") as rec:
        path = published_weights(name)
        if path is None:
            pytest.skip(f"published {name}.weights not available offline "
                        f"(set BREATHCHECK_{'YOLOV3' if name == 'yolov3' else 'TINY'}_WEIGHTS)")
        t0 = time.perf_counter()
        data = Path(path).read_bytes()
        cfg = C.load_config(cfg_path)
        model = read_weights(data, cfg)  # raises on any trailing or missing byte
        assert len(model) == len(cfg.indices("convolutional"))
        assert time.perf_counter() - t0 < 10
        rec.detail = f"{len(data):,} bytes consumed exactly"


# ---------------------------------------------------------- 2: speed ratio


def test_criterion_2_full_vs_tiny_ratio(capsys, criterion):
    with criterion("2", "bench median latency full/tiny >= 4.0 at 416x416") as rec:
        t0 = time.perf_counter()
        code, out, _ = cli_run(capsys, "bench", YOLOV3_CFG, TINY_CFG, "--size", 416,
                               "--warmup", 2, "--iters", 7)
        assert code == 0
        ratio = float(re.search(r"speedup yolov3/yolov3-tiny \[cpu x1 @416\]: ([\d.]+)x", out).group(1))
        rec.detail = f"ratio {ratio:.2f} on a {os.cpu_count()}-core host"
        assert ratio >= 4.0
        assert time.perf_counter() - t0 < 600


def test_criterion_2_thread_sweep(criterion):
    with criterion("2b", "median at 4 threads <= median at 1 thread (>=4-core hosts)") as rec:
        cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
        if cores < 4:
            pytest.skip(f"host exposes {cores} core(s); the sweep is defined for >= 4")
        medians = {}
        for threads in (1, 4):
            model = Model.load(YOLOV3_CFG, threads=threads)
            cell = bench.bench_model(model, bench.BenchConfig(threads=threads, warmup=2, iters=7), label="full")
            model.workspace.close()
            medians[threads] = cell.median_ms
        rec.detail = f"1 thread {medians[1]:.0f} ms, 4 threads {medians[4]:.0f} ms"
        assert medians[4] <= medians[1]


# ------------------------------------------------------------ 3: conv oracle


def test_criterion_3_conv_equivalence(criterion):
    with criterion("3", "200 random convs, optimized vs reference, rel err <= 1e-4") as rec:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            x, w, b, stride, pad = random_conv_case(rng)
            ref = ops.convolve_reference(x, w, b, stride, pad)
            got = ops.convolve_optimized(x, w, b, stride, pad)
            assert got.shape == ref.shape
            worst = max(worst, rel_err(got, ref))
        elapsed = time.perf_counter() - t0
        rec.detail = f"max rel err {worst:.2e}"
        assert worst <= 1e-4
        assert elapsed < 60


# ------------------------------------------------------------ 4: BN folding


def test_criterion_4_bn_folding(criterion):
    with criterion("4", "100 random layers, folded vs conv->BN, abs err <= 1e-5") as rec:
        rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(100):
            n, c = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            k = int(rng.choice([1, 3]))
            x = rng.uniform(-1, 1, (c, int(rng.integers(3, 12)), int(rng.integers(3, 12))))
            w = rng.normal(0, 0.3, (n, c, k, k))
            gamma, beta = rng.uniform(0.5, 1.5, n), rng.normal(0, 1, n)
            mean, var = rng.normal(0, 0.5, n), rng.uniform(0.2, 2.0, n)
            expected = batchnorm_f64(conv_f64(x, w, np.zeros(n), 1, k // 2), gamma, beta, mean, var, BN_EPSILON)
            fw, fb = fold_batchnorm(w, beta, gamma, mean, var)
            got = ops.convolve(x.astype(np.float32), fw, fb, 1, k // 2)
            worst = max(worst, float(np.abs(got - expected).max()))
        rec.detail = f"max abs err {worst:.2e}"
        assert worst <= 1e-5


# ------------------------------------------------------------------ 5: NMS


def test_criterion_5_nms_bruteforce(criterion):
    with criterion("5", "500 random sets (<=20 boxes, 3 classes) match greedy oracle exactly") as rec:
        rng = random.Random(5)
        confidences = [0.3, 0.5, 0.7, 0.9]
        for _ in range(500):
            dets = [
                Detection(
                    BBox(rng.random(), rng.random(), rng.uniform(0.02, 0.5), rng.uniform(0.02, 0.5)),
                    rng.randrange(3),
                    rng.choice(confidences) if rng.random() < 0.3 else rng.random(),
                )
                for _ in range(rng.randint(0, 20))
            ]
            thr = rng.choice([0.3, 0.45, 0.5, rng.random()])
            assert head.nms(dets, thr) == greedy_nms_literal(dets, thr)
        rec.detail = "500/500 identical"


# ------------------------------------------------------------- 6: geometry


def test_criterion_6_geometry(tmp_path, criterion):
    with criterion("6", "letterbox <= 1 px, VOC->YOLO <= 0.5 px, serializations exact") as rec:
        rng = random.Random(6)
        worst_lb = worst_voc = 0.0
        for _ in range(2000):
            ow, oh = rng.randint(16, 4000), rng.randint(16, 4000)
            net = rng.choice([320, 416, 608])
            w, h = rng.uniform(0.02, 0.5), rng.uniform(0.02, 0.5)
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
            t = head.letterbox_transform(ow, oh, net, net)
            sx, sy = t.scale * ow, t.scale * oh
            net_box = BBox((cx * sx + t.pad_x) / net, (cy * sy + t.pad_y) / net, w * sx / net, h * sy / net)
            back = head.unletterbox([Detection(net_box, 0, 1.0)], t)[0].bbox
            for i, (a, b) in enumerate(zip(back.corners, BBox(cx, cy, w, h).corners)):
                worst_lb = max(worst_lb, abs(a - b) * (ow if i % 2 == 0 else oh))

            x0, x1 = sorted(rng.uniform(0, ow) for _ in range(2))
            y0, y1 = sorted(rng.uniform(0, oh) for _ in range(2))
            if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
                continue
            ann = dataset.VocAnnotation(ow, oh, objects=[dataset.VocObject("face", x0, y0, x1, y1)])
            (label,) = dataset.parse_labels(dataset.format_labels(dataset.voc_to_yolo(ann, ["face"])))
            for a, b in zip(label.to_corners(ow, oh), (x0, y0, x1, y1)):
                worst_voc = max(worst_voc, abs(a - b))
        assert worst_lb <= 1.0
        assert worst_voc <= 0.5

        for path in (YOLOV3_CFG, TINY_CFG):
            cfg = C.load_config(path)
            for variant in (cfg, C.rewrite_for_classes(cfg, 2), C.apply_freeze(cfg, len(cfg.layers) - 2)):
                assert C.parse_config(C.serialize_config(variant)) == variant

        labels = [dataset.YoloLabel(rng.randrange(5), *(round(rng.random(), 6) for _ in range(4)))
                  for _ in range(200)]
        text = dataset.format_labels(labels)
        assert dataset.parse_labels(text) == labels
        assert dataset.format_labels(dataset.parse_labels(text)) == text
        rec.detail = f"letterbox {worst_lb:.3f} px, VOC {worst_voc:.2e} px"


# -------------------------------------------------------- 7: state machine


def test_criterion_7_state_machine(criterion):
    with criterion("7", ">=10,000 random event sequences keep all session invariants") as rec:
        rng = random.Random(7)
        n = 10_000
        for i in range(n):
            problems = walk(rng)
            assert not problems, f"sequence {i}: {problems}"
            used, ok = liveness_steps(rng)
            assert ok, f"sequence {i} needed {used} operations"
        rec.detail = f"{n} walks + {n} liveness runs clean"


# ----------------------------------------------------------- 8: end to end


def _frames(tmp_path, hits):
    frames = tmp_path / "frames"
    frames.mkdir(exist_ok=True)
    for i in range(len(hits)):
        (frames / f"{i:03d}.jpg").write_bytes(images.encode_jpeg(np.full((48, 64, 3), 40 + i, np.uint8)))
    both = [
        {"class": "face", "confidence": 0.91, "cx": 0.4, "cy": 0.35, "w": 0.3, "h": 0.45},
        {"class": "breathalyzer", "confidence": 0.77, "cx": 0.6, "cy": 0.7, "w": 0.08, "h": 0.2},
    ]
    dets = tmp_path / "dets.json"
    dets.write_text(json.dumps([both if h else both[:1] for h in hits]))
    return frames, dets


def test_criterion_8_end_to_end(tmp_path, capsys, criterion, monkeypatch):
    with criterion("8", "verify reaches Accepted via stub server and biometric stub; fail-closed when down") as rec:
        frames, dets = _frames(tmp_path, [0, 1, 1, 1, 1])

        code, out, _ = cli_run(capsys, "verify", frames, "--detections", dets, "--stub", "accept-all")
        remote = json.loads(out)
        assert code == 0 and remote["state"] == "Accepted" and "RoutedRemote" in remote["path"]

        code, out, _ = cli_run(capsys, "verify", frames, "--detections", dets, "--capability", "biometric",
                               "--biometric-stub", "match")
        local = json.loads(out)
        assert code == 0 and local["state"] == "Accepted" and "RoutedLocal" in local["path"]

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            dead = f"127.0.0.1:{s.getsockname()[1]}"
        attempts, sleeps = [], []

        def counting_send(payload, endpoint, timeout):
            attempts.append(endpoint)
            return client.send_once(payload, endpoint, timeout)

        real_submit = client.submit_remote
        monkeypatch.setattr(
            "breathcheck.verify.submit_remote",
            lambda payload, endpoint, **kw: real_submit(payload, endpoint, send=counting_send,
                                                        sleep=lambda s: (sleeps.append(s), time.sleep(s)), **kw),
        )
        code, out, _ = cli_run(capsys, "verify", frames, "--detections", dets, "--endpoint", dead)
        down = json.loads(out)
        assert code == 1 and (down["state"], down["reason"]) == ("Rejected", "unreachable")
        assert len(attempts) == 4 and sleeps == pytest.approx([0.2, 0.4, 0.8])
        rec.detail = "remote Accepted, local Accepted, down -> Rejected(unreachable) after 3 retries"


# ------------------------------------------------------ 9: optional network


def _fetch(url: str, dest: Path) -> Path:
    if not dest.exists():
        with urllib.request.urlopen(url, timeout=60) as resp:
            dest.write_bytes(resp.read())
    return dest


def test_criterion_9_pretrained_sanity(tmp_path_factory, criterion):
    with criterion("9", "COCO-pretrained tiny weights find a correct-class object (network-gated)") as rec:
        weights = published_weights("yolov3-tiny")
        image = os.environ.get("BREATHCHECK_TEST_IMAGE")
        if weights is None or image is None:
            if not network_enabled():
                pytest.skip("set BREATHCHECK_NETWORK=1 (or provide weights and BREATHCHECK_TEST_IMAGE)")
            cache = tmp_path_factory.mktemp("pretrained")
            try:
                weights = weights or str(_fetch(TINY_WEIGHTS_URL, cache / "yolov3-tiny.weights"))
                image = image or str(_fetch(DOG_URL, cache / "dog.jpg"))
            except OSError as exc:
                pytest.skip(f"download failed: {exc}")
        expected = set(os.environ.get("BREATHCHECK_TEST_IMAGE_CLASSES", ",".join(DOG_CLASSES)).split(","))
        model = Model.load(TINY_CFG, weights, data_path("coco.names"))
        found = {d.class_name for d in model.detect(images.decode_image(image))}
        rec.detail = f"detected {sorted(found)}"
        assert found & expected

