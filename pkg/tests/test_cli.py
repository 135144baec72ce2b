import io
import subprocess
import sys

from agentee.cli import build_parser, main, repl
from agentee.inference import mock_generate
from agentee.pipeline import Forwarder, data_path, default_system_prompt
from agentee.prompt import LabeledPrompt, Message, MsgRole


def agentee(*args, stdin="", timeout=120):
    return subprocess.run([sys.executable, "-m", "agentee.cli", *args], input=stdin,
                          capture_output=True, text=True, timeout=timeout)


def hello_oracle():
    prompt = LabeledPrompt((Message(MsgRole.SYSTEM, default_system_prompt()), Message(MsgRole.USER, "hello")))
    return mock_generate(prompt, 32)


def test_chat_prints_mock_reply_and_exits_on_eof():
    proc = agentee("chat", "--no-tool", stdin="hello\n")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout == hello_oracle() + "\n"


def test_repl_without_pipeline():
    out = io.StringIO()
    repl(Forwarder(), ["hello\n", "\n", "/quit\n", "never sent\n"], out)
    assert out.getvalue().startswith("pipeline-not-ready: ")
    assert out.getvalue().count("\n") == 1


def test_bench_parser_defaults():
    parser = build_parser()
    args = parser.parse_args(["bench", "--agent", "chatbot", "--model-config", "m.conf",
                              "--queries", "q.txt", "--out", "o"])
    assert args.configs == "in-process,process-shm,realm-csm" and args.max_tokens == 20


def test_bench_writes_records_and_report(tmp_path):
    out = tmp_path / "out"
    rc = main(["bench", "--agent", "chatbot", "--model-config", str(data_path("model_mock.conf")),
               "--configs", "in-process,realm-csm", "--queries", str(data_path("queries_chatbot.txt")),
               "--out", str(out), "--max-tokens", "4"])
    assert rc == 0
    assert len((out / "records.tsv").read_text().splitlines()) == 18
    report = (out / "report.txt").read_text()
    assert "AgenTEE vs NW Process" in report and "AgenTEE vs NW VM" not in report


def test_observe_realm_csm_finds_nothing(tmp_path):
    probes = tmp_path / "probes.txt"
    probes.write_text("hello\n" + default_system_prompt().splitlines()[0][:24] + "\n")
    proc = agentee("observe", "--probes", str(probes), "--mode", "realm-csm")
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout == ""
