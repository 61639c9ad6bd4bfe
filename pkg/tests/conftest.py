import numpy as np
import pytest

from binmask.data import Vocab, gen_classification_task, gen_tagging_task
from binmask.model import TransformerConfig, init_params
from binmask.persistence import Checkpoint

TINY = TransformerConfig(num_blocks=2, hidden=16, ff=32, heads=2, vocab_size=40, max_len=16, num_labels=2)


def tiny_pretrained(seed=0, arch=TINY):
    params = init_params(arch, seed, head="mlm")
    cfg = {"arch": arch.to_dict(), "head": "mlm", "regime": "pretrain", "seed": seed}
    return Checkpoint(cfg, params)


@pytest.fixture
def tiny_arch():
    return TINY


@pytest.fixture
def pretrained():
    return tiny_pretrained()


@pytest.fixture
def cls_task():
    return gen_classification_task(0, Vocab(40), 2, {"train": 48, "dev": 24, "test": 24},
                                   n_clusters=8, length=(6, 10))


@pytest.fixture
def tag_task():
    return gen_tagging_task(0, Vocab(40), 3, {"train": 24, "dev": 12, "test": 12}, n_clusters=8, length=(6, 10))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` returns a recorder; call it with (ok, detail) or let an exception mark FAIL."""
    state = {}

    def start(n, title):
        state.update(n=n, title=title)
        ACCEPTANCE[n] = ("FAIL", title, "did not finish")

        def done(ok, detail=""):
            ACCEPTANCE[n] = ("PASS" if ok else "FAIL", title, detail)
            return ok

        return done

    yield start
    rep = getattr(request.node, "rep_call", None)
    if "n" in state and rep is not None and rep.failed:
        status, title, detail = ACCEPTANCE[state["n"]]
        if status == "PASS" or detail == "did not finish":
            ACCEPTANCE[state["n"]] = ("FAIL", title, str(rep.longrepr.reprcrash.message)[:200])


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        tr.write_line(f"[{status}] criterion {n:2d}: {title}" + (f" | {detail}" if detail else ""))
