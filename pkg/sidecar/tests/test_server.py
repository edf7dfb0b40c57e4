from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

SRC = Path(__file__).parent.parent / "src"


def run_session(lines: list[dict], argv: list[str]) -> subprocess.CompletedProcess:
    env = dict(os.environ)
    env["PYTHONPATH"] = str(SRC) + os.pathsep + env.get("PYTHONPATH", "")
    stdin = "".join(json.dumps(line) + "\n" for line in lines)
    return subprocess.run(
        [sys.executable, "-m", "medcod_scorer", *argv],
        input=stdin,
        capture_output=True,
        text=True,
        env=env,
        timeout=60,
    )


def parse_stdout(proc: subprocess.CompletedProcess) -> list[dict]:
    return [json.loads(line) for line in proc.stdout.splitlines() if line.strip()]


SCORE_SESSION = [
    {"id": 1, "op": "score", "triples": [["s1", "h1", "r1"]]},
    {"id": 2, "op": "score", "triples": [["s2", "h2", "r2"], ["s3", "h3", "r3"]]},
    {"id": 3, "op": "score", "triples": []},
    {"id": 4, "op": "shutdown"},
]


class TestEchoProtocol:
    def test_handshake_shape(self):
        proc = run_session([{"id": 1, "op": "shutdown"}], ["--echo", "0.5"])
        hello = parse_stdout(proc)[0]["hello"]
        assert hello["protocol"] == 1
        assert set(hello["capabilities"]) == {"comet", "bert-embed"}

    def test_round_trip_transcript_is_byte_stable(self):
        first = run_session(SCORE_SESSION, ["--echo", "0.5"])
        second = run_session(SCORE_SESSION, ["--echo", "0.5"])
        assert first.returncode == 0
        assert first.stdout == second.stdout
        responses = parse_stdout(first)
        assert len(responses) == 5  # hello + 3 scores + shutdown ack
        assert responses[1] == {"id": 1, "value": [0.5]}
        assert responses[2] == {"id": 2, "value": [0.5, 0.5]}
        assert responses[3] == {"id": 3, "value": []}
        assert responses[4] == {"id": 4, "value": "ok"}

    def test_echo_value_flag(self):
        proc = run_session(
            [{"id": 1, "op": "score", "triples": [["s", "h", "r"]] * 3},
             {"id": 2, "op": "shutdown"}],
            ["--echo", "0.25"],
        )
        assert parse_stdout(proc)[1]["value"] == [0.25, 0.25, 0.25]

    def test_shutdown_exits_zero(self):
        proc = run_session([{"id": 1, "op": "shutdown"}], ["--echo", "0.5"])
        assert proc.returncode == 0

    def test_unknown_op(self):
        proc = run_session(
            [{"id": 1, "op": "explode"}, {"id": 2, "op": "shutdown"}], ["--echo", "0.5"]
        )
        responses = parse_stdout(proc)
        assert responses[1] == {"id": 1, "error": "unknown op"}
        assert responses[2] == {"id": 2, "value": "ok"}  # loop continued

    def test_malformed_request_keeps_serving(self):
        env = dict(os.environ)
        env["PYTHONPATH"] = str(SRC) + os.pathsep + env.get("PYTHONPATH", "")
        stdin = "this is not json\n" + json.dumps({"id": 1, "op": "shutdown"}) + "\n"
        proc = subprocess.run(
            [sys.executable, "-m", "medcod_scorer", "--echo", "0.5"],
            input=stdin, capture_output=True, text=True, env=env, timeout=60,
        )
        responses = parse_stdout(proc)
        assert responses[1]["id"] is None
        assert "malformed" in responses[1]["error"]
        assert responses[2] == {"id": 1, "value": "ok"}
        assert proc.returncode == 0

    def test_non_increasing_id_rejected(self):
        proc = run_session(
            [
                {"id": 5, "op": "score", "triples": []},
                {"id": 5, "op": "score", "triples": []},
                {"id": 6, "op": "shutdown"},
            ],
            ["--echo", "0.5"],
        )
        responses = parse_stdout(proc)
        assert "non-increasing" in responses[2]["error"]

    def test_no_mode_exits_before_handshake(self):
        proc = run_session([], [])
        assert proc.returncode == 2
        assert proc.stdout == ""
        assert "required" in proc.stderr

    def test_diagnostics_never_on_stdout(self):
        proc = run_session(SCORE_SESSION, ["--echo", "0.5"])
        for line in proc.stdout.splitlines():
            json.loads(line)  # every stdout line is protocol JSON


class TestEmbedSim:
    def test_identity_single_token(self):
        proc = run_session(
            [
                {"id": 1, "op": "embed-sim", "reference": "fiebre", "hypothesis": "fiebre"},
                {"id": 2, "op": "shutdown"},
            ],
            ["--echo", "0.5"],
        )
        assert parse_stdout(proc)[1]["value"] == [[1.0]]

    def test_identity_text_reaches_f1_through_aggregation(self):
        medcod_metrics = pytest.importorskip(
            "medcod.metrics", reason="primary package not installed"
        )
        proc = run_session(
            [
                {
                    "id": 1,
                    "op": "embed-sim",
                    "reference": "la fiebre es alta hoy",
                    "hypothesis": "la fiebre es alta hoy",
                },
                {"id": 2, "op": "shutdown"},
            ],
            ["--echo", "0.5"],
        )
        matrix = parse_stdout(proc)[1]["value"]
        score = medcod_metrics.bertscore_from_similarity(matrix)
        assert abs(score.value - 1.0) <= 1e-6

    def test_hand_matrix_aggregates_to_three_quarters(self):
        medcod_metrics = pytest.importorskip(
            "medcod.metrics", reason="primary package not installed"
        )
        score = medcod_metrics.bertscore_from_similarity([[1.0, 0.0], [0.0, 0.5]])
        assert score.value == 0.75

    def test_disjoint_tokens(self):
        proc = run_session(
            [
                {"id": 1, "op": "embed-sim", "reference": "aa bb", "hypothesis": "cc"},
                {"id": 2, "op": "shutdown"},
            ],
            ["--echo", "0.5"],
        )
        assert parse_stdout(proc)[1]["value"] == [[0.0], [0.0]]


class TestScoreDeterminism:
    def test_identical_triples_identical_scores(self):
        proc = run_session(
            [
                {"id": 1, "op": "score", "triples": [["s", "h", "r"], ["s", "h", "r"]]},
                {"id": 2, "op": "shutdown"},
            ],
            ["--echo", "0.5"],
        )
        values = parse_stdout(proc)[1]["value"]
        assert values[0] == values[1]


@pytest.mark.skipif(
    not os.environ.get("MEDCOD_SCORER_MODEL_TEST"),
    reason="set MEDCOD_SCORER_MODEL_TEST=<model-name> to exercise model assets",
)
class TestModelMode:
    def test_identity_outranks_shuffled_reference(self):
        # sanity property within one model run: hyp == ref scores at least
        # as high as a token-shuffled reference, over >= 20 sentences
        import random

        model = os.environ["MEDCOD_SCORER_MODEL_TEST"]
        rng = random.Random(5)
        sentences = [
            f"the patient reported {w} and mild fever on day {i}"
            for i, w in enumerate(
                ["cough", "nausea", "pain", "rash", "chills"] * 4
            )
        ]
        requests = []
        rid = 0
        for sentence in sentences:
            shuffled_tokens = sentence.split()
            rng.shuffle(shuffled_tokens)
            shuffled = " ".join(shuffled_tokens)
            rid += 1
            requests.append(
                {"id": rid, "op": "score",
                 "triples": [["src", sentence, sentence], ["src", shuffled, sentence]]}
            )
        rid += 1
        requests.append({"id": rid, "op": "shutdown"})
        proc = run_session(requests, ["--model", model])
        assert proc.returncode == 0, proc.stderr
        responses = parse_stdout(proc)[1:-1]
        assert len(responses) >= 20
        for response in responses:
            identical, shuffled = response["value"]
            assert identical >= shuffled - 1e-9
