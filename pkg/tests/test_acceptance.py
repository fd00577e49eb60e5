"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Criterion 9 (live endpoints) is skipped unless OASIS_FORGE_LIVE=1.
"""

from __future__ import annotations

import json
import math
import os
import random
import re
import signal
import statistics
import subprocess
import sys
import time
from collections import Counter
from itertools import product
from pathlib import Path

import pytest

from oasis_forge.analytics import (
    FIELD_INSTRUCTION,
    UNIT_CHARACTERS,
    UNIT_WORDS,
    length_stats,
    ttr,
    verb_object_summary,
)
from oasis_forge.gateway import ModelResponse
from oasis_forge.pipeline import (
    EXPORT_FILE,
    STAGE_ORDER,
    load_sft_jsonl,
    report,
    run_all,
)
from oasis_forge.prompts import (
    TriageKind,
    get_family,
    parse_category,
    parse_score,
    render_hook,
    render_judge,
)
from oasis_forge.quality import Verdict, decide, verdict_oracle
from oasis_forge.recycle import choose_instruction_index, pair_with_instruction, rule_filter
from oasis_forge.respond import Provenance, ResponseCandidate, SftSample, avg_nll_of, nll_select
from scenario import build_scenario, make_config, write_config_yaml

GOLDEN_DIR = Path(__file__).parent / "golden"


def announce(number: int, message: str) -> None:
    print(f"[acceptance] criterion {number}: PASS: {message}")


# ---------------------------------------------------------------------------
# Criterion 1: threshold oracle and monotonicity, < 1 s
# ---------------------------------------------------------------------------


def test_c1_threshold_oracle_and_monotonicity() -> None:
    started = time.monotonic()
    table = verdict_oracle()
    assert len(table) == 625

    accepted = 0
    for scores in product(range(1, 6), repeat=4):
        s, c, h, n = scores
        # Independent rule transcription, used to double-check both sides.
        expected = (
            Verdict.ACCEPT
            if (h == 5 and n == 5 and s >= 3 and c >= 3 and s + c >= 7)
            else Verdict.REJECT
        )
        verdict, _ = decide(*scores)
        assert verdict == table[scores] == expected, scores
        accepted += verdict is Verdict.ACCEPT

    perturbations = 0
    for scores in product(range(1, 6), repeat=4):
        for position in range(4):
            raised = list(scores)
            raised[position] = min(5, raised[position] + 1)
            perturbations += 1
            if table[scores] is Verdict.ACCEPT:
                assert table[tuple(raised)] is Verdict.ACCEPT, (scores, position)
    assert perturbations == 2500

    elapsed = time.monotonic() - started
    assert elapsed < 1.0, f"took {elapsed:.3f}s"
    announce(1, f"verdicts match on 625 tuples ({accepted} accepting), monotone on 2500 "
                f"perturbations in {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# Criterion 2: prompt fidelity, < 1 s
# ---------------------------------------------------------------------------


def test_c2_prompt_fidelity() -> None:
    started = time.monotonic()

    payload_text = "There is a cat on the chart."
    golden = (GOLDEN_DIR / "categorize.txt").read_text(encoding="utf-8")
    assert render_judge("categorize", payload_text) == golden.replace("{text}", payload_text)

    query = "What trend does the chart show?"
    for prompt_id in ("solvability", "clarity", "hallucination", "nonsense"):
        golden = (GOLDEN_DIR / f"{prompt_id}.txt").read_text(encoding="utf-8")
        assert render_judge(prompt_id, query) == golden.replace("{query}", query), prompt_id

    family = get_family("qwen2-vl")
    hook = render_hook(family)
    assert hook == "<|im_start|>User <image>"
    assert family.user_close not in hook
    assert family.assistant_open not in hook

    elapsed = time.monotonic() - started
    assert elapsed < 1.0
    announce(2, f"five renders byte-identical to goldens; hook render exact in {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# Criterion 3: parser robustness, < 5 s
# ---------------------------------------------------------------------------


def test_c3_parser_robustness() -> None:
    started = time.monotonic()
    rng = random.Random(0xC3)
    alphabet = "abcdefgh [](){}<>:;.,!?\n\t0123456789"
    marker_re = re.compile(r"\[\[([1-5])\]\]")

    exact = 0
    for _ in range(10_000):
        value = rng.randrange(1, 6)
        while True:
            left = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 60)))
            right = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 60)))
            text = f"{left}[[{value}]]{right}"
            if len(marker_re.findall(text)) == 1:
                break
        assert parse_score(text) == value, repr(text)
        exact += 1
    assert exact == 10_000

    golden = (GOLDEN_DIR / "categorize.txt").read_text(encoding="utf-8")
    answers = re.findall(r"Answer: \n(.*?)\n+----- ", golden, re.DOTALL)
    assert len(answers) == 6
    expected_kinds = (
        TriageKind.INSTRUCTION,
        TriageKind.CAPTION,
        TriageKind.INSTRUCTION,
        TriageKind.INSTRUCTION,
        TriageKind.INSTRUCTION,
        TriageKind.CAPTION,
    )
    for answer, expected in zip(answers, expected_kinds):
        kind, extracted = parse_category(answer)
        assert kind is expected
        if expected is TriageKind.INSTRUCTION:
            assert extracted == answer[len("Instruction:") :].strip()
        else:
            assert extracted is None

    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    announce(3, f"10,000/10,000 paddings exact; six worked examples correct in {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# Criteria 4 and 5: end-to-end determinism and conservation, < 60 s
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    scenario = build_scenario(root, 200)
    started = time.monotonic()
    oracle_export = run_all(make_config(scenario, "oracle"))
    return {
        "root": root,
        "scenario": scenario,
        "oracle_bytes": oracle_export.read_bytes(),
        "started": started,
    }


def test_c4_end_to_end_determinism(e2e) -> None:
    scenario = e2e["scenario"]
    oracle_bytes = e2e["oracle_bytes"]

    for repetition in ("rep2", "rep3"):
        export = run_all(make_config(scenario, repetition))
        assert export.read_bytes() == oracle_bytes, repetition

    # Interrupt at every stage boundary: stop there, then resume to the end.
    for stage in STAGE_ORDER:
        config = make_config(scenario, f"boundary-{stage}")
        run_all(config, stop_after=stage)
        export = run_all(config, resume=True)
        assert export.read_bytes() == oracle_bytes, f"resume after {stage}"

    # Hard kill: SIGKILL the CLI mid-run at two different points, then resume.
    for delay in (0.5, 1.2):
        run_name = f"killed-{delay}"
        config_path = write_config_yaml(
            scenario, run_name, e2e["root"] / f"config-{run_name}.json", checkpoint_every=4
        )
        process = subprocess.Popen(
            [sys.executable, "-m", "oasis_forge.cli", "run-all", "--config", str(config_path)],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        time.sleep(delay)
        process.send_signal(signal.SIGKILL)
        process.wait()
        finish = subprocess.run(
            [
                sys.executable,
                "-m",
                "oasis_forge.cli",
                "run-all",
                "--config",
                str(config_path),
                "--resume",
            ],
            capture_output=True,
            text=True,
        )
        assert finish.returncode == 0, finish.stderr
        resumed = (scenario.root / run_name / EXPORT_FILE).read_bytes()
        assert resumed == oracle_bytes, f"kill at {delay}s"

    elapsed = time.monotonic() - e2e["started"]
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    announce(4, f"byte-identical export across 3 runs, 5 boundary resumes, and 2 hard kills "
                f"in {elapsed:.1f}s")


def test_c5_conservation_and_exact_counts(e2e) -> None:
    scenario = e2e["scenario"]
    metrics = report(scenario.root / "oracle")

    for stage, counts in metrics.stages.items():
        assert counts["in"] == counts["out"] + counts["errored"] + counts["filtered"], stage

    expected = scenario.expected
    triage = metrics.stages["triage"]
    assert triage["instruction"] == expected["triage"]["instruction"] == 100
    assert triage["caption"] == expected["triage"]["caption"] == 50
    assert triage["malformed"] == expected["triage"]["malformed"] == 50
    # 2 instruction / 1 caption / 1 malformed per 4 generations -> 2/3.
    assert metrics.triage_pass_rate == pytest.approx(2 / 3)

    qc = metrics.stages["qc"]
    assert qc["accept"] == expected["qc"]["accept"]
    assert qc["reject"] == expected["qc"]["reject"]
    assert qc["invalid"] == expected["qc"]["invalid"]

    recycle = metrics.stages["recycle"]
    for key in ("kept", "rule_rejected", "llm_dropped", "invalid"):
        assert recycle[key] == expected["recycle"][key]

    export_lines = len(e2e["oracle_bytes"].decode("utf-8").splitlines())
    assert export_lines == scenario.expected_export_lines

    announce(5, "conservation holds at every stage; report reproduces the scripted counts "
                f"(pass rate {metrics.triage_pass_rate:.4f} == 2/3)")


# ---------------------------------------------------------------------------
# Criterion 6: NLL selection against brute force
# ---------------------------------------------------------------------------


def test_c6_nll_selection_brute_force() -> None:
    rng = random.Random(0xC6)
    tie_cases = 0
    for trial in range(1_000):
        size = rng.randrange(1, 8)
        candidates = []
        raw_logprob_lists = []
        for index in range(size):
            length = rng.randrange(1, 30)
            logprobs = tuple((f"t{j}", -rng.uniform(0.001, 9.0)) for j in range(length))
            if candidates and rng.random() < 0.25:
                logprobs = raw_logprob_lists[0]  # duplicate -> exact tie
            raw_logprob_lists.append(logprobs)
            response = ModelResponse(text=f"cand-{index}", token_logprobs=logprobs)
            candidates.append(
                ResponseCandidate(
                    text=f"cand-{index}", sample_index=index, avg_nll=avg_nll_of(response)
                )
            )

        # Brute-force recomputation from the raw logprob lists.
        recomputed = [
            -math.fsum(lp for _, lp in logprobs) / len(logprobs)
            for logprobs in raw_logprob_lists
        ]
        for candidate, expected in zip(candidates, recomputed):
            assert abs(candidate.avg_nll - expected) < 1e-12

        best_value = min(recomputed)
        brute_index = min(i for i, value in enumerate(recomputed) if value == best_value)
        if recomputed.count(best_value) > 1:
            tie_cases += 1
        assert nll_select(candidates).sample_index == brute_index, trial

    assert tie_cases > 50  # the tie-break path was genuinely exercised
    announce(6, f"1,000 candidate sets agree with brute-force argmin ({tie_cases} tie cases)")


# ---------------------------------------------------------------------------
# Criterion 7: analytics oracles, < 30 s
# ---------------------------------------------------------------------------


def _sample(text: str, index: int) -> SftSample:
    return SftSample(
        image_id=f"img-{index}",
        instruction=text,
        response=text,
        provenance=Provenance.OASIS_INSTRUCTION,
    )


def test_c7_analytics_oracles() -> None:
    started = time.monotonic()
    rng = random.Random(0xC7)
    vocabulary = [f"w{i}" for i in range(120)] + ["The", "cat!", "héllo", "数字"]

    for corpus_index in range(100):
        texts = [
            " ".join(rng.choice(vocabulary) for _ in range(rng.randrange(1, 25)))
            for _ in range(rng.randrange(1, 1000))
        ]
        samples = [_sample(text, index) for index, text in enumerate(texts)]

        words = length_stats(samples, FIELD_INSTRUCTION, UNIT_WORDS)
        chars = length_stats(samples, FIELD_INSTRUCTION, UNIT_CHARACTERS)
        word_lengths = [len(text.split()) for text in texts]
        char_lengths = [len(text) for text in texts]
        assert abs(words.mean - statistics.fmean(word_lengths)) < 1e-9
        assert abs(words.std_dev - statistics.pstdev(word_lengths)) < 1e-9
        assert abs(chars.mean - statistics.fmean(char_lengths)) < 1e-9
        assert abs(chars.std_dev - statistics.pstdev(char_lengths)) < 1e-9

        from oasis_forge.analytics import tokenize

        tokens = [token for text in texts for token in tokenize(text)]
        measured = ttr(samples, FIELD_INSTRUCTION)
        assert measured.total_tokens == len(tokens)
        assert measured.unique_tokens == len(set(tokens))
        assert abs(measured.ratio - len(set(tokens)) / len(tokens)) < 1e-9

    hand = ttr([_sample("the cat sat on the mat", 0)], FIELD_INSTRUCTION)
    assert (hand.unique_tokens, hand.total_tokens) == (5, 6)
    assert hand.ratio == 5 / 6

    # A verb at exactly 1.0% frequency is excluded (strict >).
    pairs = [("common", "x")] * 990 + [("edge", "x")] * 10
    iterator = iter(pairs)
    samples = [_sample(f"text {i}", i) for i in range(1000)]
    rows = verb_object_summary(samples, lambda text: [next(iterator)])
    assert {row.verb for row in rows} == {"common"}

    elapsed = time.monotonic() - started
    assert elapsed < 30.0
    announce(7, f"100 corpora match brute force within 1e-9; TTR hand case 5/6; "
                f"1.0% verb excluded in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 8: recycle determinism and uniformity
# ---------------------------------------------------------------------------


def test_c8_recycle_determinism_and_uniformity() -> None:
    from oasis_forge.recycle import DescriptionInstructionList

    instructions = DescriptionInstructionList(
        instructions=tuple(f"instruction {i}" for i in range(10))
    )
    candidate = rule_filter("image-fixed", 3, "A stable caption for replay checking purposes.")
    first = pair_with_instruction(candidate, instructions, rng_seed=99)
    second = pair_with_instruction(candidate, instructions, rng_seed=99)
    assert first == second

    # Frozen uniformity check (seed 6 verified by direct computation: all ten
    # bins land in [961, 1022], within the +/-5% band).
    counts = Counter(
        choose_instruction_index(6, f"image-{i:05d}", 0, 10) for i in range(10_000)
    )
    assert sum(counts.values()) == 10_000
    for index in range(10):
        assert 950 <= counts[index] <= 1050, counts

    announce(8, f"fixed-seed pairing replays identically; 10k draws within +/-5% "
                f"(min {min(counts.values())}, max {max(counts.values())})")


# ---------------------------------------------------------------------------
# Criterion 9: live smoke test (optional, network-gated, excluded from CI)
# ---------------------------------------------------------------------------


@pytest.mark.skipif(
    os.environ.get("OASIS_FORGE_LIVE") != "1",
    reason="live smoke test runs only with OASIS_FORGE_LIVE=1 and operator endpoints",
)
def test_c9_live_smoke(tmp_path) -> None:
    """20-image run against operator-supplied endpoints.

    Requires OASIS_FORGE_LIVE=1 plus OASIS_FORGE_LIVE_CONFIG pointing at a run
    config whose endpoints name real OpenAI-compatible servers (credentials
    via the environment variables referenced there) and whose manifest lists
    at least 20 real images.
    """
    from oasis_forge.pipeline import RunConfig, format_report

    config_path = os.environ["OASIS_FORGE_LIVE_CONFIG"]
    config = RunConfig.from_file(config_path)
    export = run_all(config, limit=20, resume=True)
    metrics = report(config.run_dir)
    rendered = format_report(metrics)
    print(rendered)
    assert "not a target" in rendered
    assert "49.90%" in rendered and "50.90%" in rendered
    accepted = metrics.stages["qc"]["accept"]
    assert accepted > 0, "live run should accept at least one instruction"
    assert export.exists()
    announce(9, f"live run accepted {accepted} instructions")
