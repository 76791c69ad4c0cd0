import socket
import threading
import time

import pytest

from mpx.debug_agent import (
    ADDRESS_IN_USE,
    RUNNING,
    SUSPEND_REQUESTED,
    SUSPENDED,
    AgentOptions,
    DebugAgent,
    DebugController,
)
from mpx.errors import ConfigError, PortInUseError
from mpx.harness import ProbeSite


def make_controller(**kwargs):
    events = []
    controller = DebugController(0, 4, emit=events.append, **kwargs)
    return controller, events


def site(name, kind, thread=0):
    return ProbeSite(name, kind, thread, 0)


class ProbeRunner(threading.Thread):
    """Drives a scripted probe sequence through checkpoint() like a rank thread."""

    def __init__(self, controller, script, thread_key=0):
        super().__init__(daemon=True)
        self.controller = controller
        self.script = [site(n, k, thread_key) for n, k in script]
        self.done = threading.Event()

    def run(self):
        for s in self.script:
            self.controller.checkpoint(s)
        self.done.set()


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(0.005)
    raise AssertionError("condition not reached in time")


def test_hello_and_threads():
    controller, _ = make_controller()
    assert controller.execute("HELLO") == ["OK rank 0 size 4"]
    controller.register_thread(0)
    assert controller.execute("THREADS") == ["OK 1", "THREAD 0 RUNNING"]


def test_break_clear_mutate_the_set():
    controller, _ = make_controller()
    assert controller.execute("BREAK compute") == ["OK"]
    assert controller.breakpoints == {"compute"}
    assert controller.execute("CLEAR compute") == ["OK"]
    assert controller.breakpoints == set()
    assert controller.execute("CLEAR never-set") == ["OK"]


@pytest.mark.parametrize(
    "line",
    ["", "   ", "NOSUCH", "BREAK", "CLEAR ", "STEP", "STEP x", "RESUME 1 2", "HELLO extra", "INSPECT"],
)
def test_malformed_commands(line):
    controller, _ = make_controller()
    assert controller.execute(line) == ["ERR parse"]


def test_stack_and_step_require_suspension():
    controller, _ = make_controller()
    controller.register_thread(0)
    assert controller.execute("STACK 0") == ["ERR not-suspended"]
    assert controller.execute("STEP 0") == ["ERR not-suspended"]
    assert controller.execute("STACK 9") == ["ERR not-suspended"]


def test_suspend_marks_running_threads():
    controller, _ = make_controller()
    controller.register_thread(0)
    assert controller.execute("SUSPEND") == ["OK"]
    assert controller.thread_states() == {0: SUSPEND_REQUESTED}


def test_breakpoint_hit_suspends_and_reports_stack():
    controller, events = make_controller()
    controller.execute("BREAK b")
    runner = ProbeRunner(
        controller,
        [("a", "enter"), ("b", "enter"), ("b", "exit"), ("a", "exit")],
    )
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    assert events == ["EVT HIT b 0 enter"]
    assert controller.execute("STACK 0") == ["OK 2", "FRAME b", "FRAME a"]
    assert controller.execute("RESUME 0") == ["OK"]
    runner.done.wait(5)
    assert runner.done.is_set()
    assert controller.thread_states()[0] == RUNNING


def test_breakpoints_fire_on_enter_only():
    controller, events = make_controller()
    controller.execute("BREAK f")
    controller.execute("CLEAR f")
    runner = ProbeRunner(controller, [("f", "enter"), ("f", "exit")])
    runner.start()
    runner.done.wait(5)
    assert runner.done.is_set()
    assert events == []


def test_step_is_one_probe_event():
    controller, events = make_controller()
    controller.execute("BREAK f")
    runner = ProbeRunner(
        controller,
        [("f", "enter"), ("g", "enter"), ("g", "exit"), ("f", "exit")],
    )
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    assert controller.execute("STACK 0") == ["OK 1", "FRAME f"]
    assert controller.execute("STEP 0") == ["OK"]
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    # one event later: suspended at enter of g
    assert controller.execute("STACK 0") == ["OK 2", "FRAME g", "FRAME f"]
    assert controller.execute("STEP 0") == ["OK"]
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    # Suspended at g's exit probe: still inside g, like stopping on a
    # return statement.  The frame pops only once the thread moves on.
    assert controller.execute("STACK 0") == ["OK 2", "FRAME g", "FRAME f"]
    controller.execute("RESUME")
    runner.done.wait(5)
    assert runner.done.is_set()
    assert events[0] == "EVT HIT f 0 enter"
    assert events.count("EVT SUSPENDED 0") == 2


def test_suspend_on_start_blocks_first_checkpoint():
    controller, events = make_controller(suspend_on_start=True)
    runner = ProbeRunner(controller, [("main", "enter"), ("main", "exit")])
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    assert events == ["EVT SUSPENDED 0"]
    controller.execute("RESUME")
    runner.done.wait(5)
    assert runner.done.is_set()


def test_resume_before_thread_runs_cancels_pending_suspend():
    """A client that wins the race to RESUME must not strand the rank."""
    controller, events = make_controller(suspend_on_start=True)
    controller.register_thread(0)  # the agent pre-registers the rank thread
    assert controller.execute("RESUME") == ["OK"]
    runner = ProbeRunner(controller, [("main", "enter"), ("main", "exit")])
    runner.start()
    runner.done.wait(5)
    assert runner.done.is_set()
    assert events == []


def test_inspect_requires_suspended_owner():
    mapping = {"iter": (lambda: 41 + 1, 0)}
    controller, _ = make_controller(inspect_resolver=mapping.get)
    controller.register_thread(0)
    assert controller.execute("INSPECT nope") == ["ERR unknown-inspectable"]
    assert controller.execute("INSPECT iter") == ["ERR not-suspended"]
    controller.execute("BREAK f")
    runner = ProbeRunner(controller, [("f", "enter"), ("f", "exit")])
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    assert controller.execute("INSPECT iter") == ["OK 42"]
    controller.execute("RESUME")
    runner.done.wait(5)


def test_inspect_provider_failure_is_an_error_response():
    def boom():
        raise RuntimeError("provider exploded")

    mapping = {"boom": (boom, 0)}
    controller, _ = make_controller(inspect_resolver=mapping.get)
    controller.execute("BREAK f")
    runner = ProbeRunner(controller, [("f", "enter"), ("f", "exit")])
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    assert controller.execute("INSPECT boom") == ["ERR inspect-failed"]
    controller.execute("RESUME")
    runner.done.wait(5)


def test_detach_clears_breakpoints_and_resumes():
    controller, _ = make_controller()
    controller.execute("BREAK f")
    runner = ProbeRunner(controller, [("f", "enter"), ("f", "exit")])
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    assert controller.execute("DETACH") == ["OK"]
    assert controller.breakpoints == set()
    runner.done.wait(5)
    assert runner.done.is_set()


def test_every_hit_names_a_live_breakpoint():
    controller, events = make_controller()
    controller.execute("BREAK f")
    controller.execute("BREAK g")
    controller.execute("CLEAR g")
    runner = ProbeRunner(
        controller,
        [("g", "enter"), ("f", "enter"), ("f", "exit"), ("g", "exit")],
    )
    runner.start()
    wait_for(lambda: controller.thread_states().get(0) == SUSPENDED)
    controller.execute("RESUME")
    runner.done.wait(5)
    hits = [e for e in events if e.startswith("EVT HIT")]
    assert hits == ["EVT HIT f 0 enter"]


def test_agent_options_validation():
    with pytest.raises(ConfigError):
        AgentOptions(port=80).validate()
    with pytest.raises(ConfigError):
        AgentOptions(port=8000, server=False).validate()


def mdwp_lines(sock_file, count):
    return [sock_file.readline().rstrip("\n") for _ in range(count)]


def test_agent_serves_one_client_and_rejects_a_second(free_port):
    port = free_port()
    agent = DebugAgent(2, 4, AgentOptions(port=port))
    agent.start()
    try:
        with socket.create_connection(("127.0.0.1", port), timeout=5) as first:
            ff = first.makefile("rw", encoding="utf-8", newline="\n")
            ff.write("HELLO\n")
            ff.flush()
            assert ff.readline() == "OK rank 2 size 4\n"
            with socket.create_connection(("127.0.0.1", port), timeout=5) as second:
                sf = second.makefile("r", encoding="utf-8", newline="\n")
                assert sf.readline() == "ERR busy\n"
            ff.write("THREADS\n")
            ff.flush()
            assert ff.readline() == "OK 1\n"
            assert ff.readline() == "THREAD 0 RUNNING\n"
    finally:
        agent.shutdown()


def test_agent_reattach_after_detach(free_port):
    port = free_port()
    agent = DebugAgent(0, 1, AgentOptions(port=port))
    agent.start()
    try:
        for _ in range(2):
            with socket.create_connection(("127.0.0.1", port), timeout=5) as conn:
                fh = conn.makefile("rw", encoding="utf-8", newline="\n")
                fh.write("HELLO\nDETACH\n")
                fh.flush()
                assert fh.readline() == "OK rank 0 size 1\n"
                assert fh.readline() == "OK\n"
                assert fh.readline() == ""  # server closes after DETACH
    finally:
        agent.shutdown()


def test_port_in_use_is_the_exact_phrase(free_port):
    port = free_port()
    blocker = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    blocker.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    blocker.bind(("", port))
    blocker.listen()
    try:
        agent = DebugAgent(0, 1, AgentOptions(port=port))
        with pytest.raises(PortInUseError) as excinfo:
            agent.start()
        assert ADDRESS_IN_USE in str(excinfo.value)
        assert str(excinfo.value) == f"address already in use: debug port {port}"
    finally:
        blocker.close()


def test_shutdown_waits_for_the_final_response(free_port):
    """The response freeing a rank must flush before shutdown returns."""
    port = free_port()
    agent = DebugAgent(0, 1, AgentOptions(port=port, suspend_on_start=True))
    agent.start()
    runner = ProbeRunner(agent.controller, [("main", "enter"), ("main", "exit")])
    runner.start()
    with socket.create_connection(("127.0.0.1", port), timeout=5) as conn:
        fh = conn.makefile("rw", encoding="utf-8", newline="\n")
        wait_for(lambda: agent.controller.thread_states().get(0) == SUSPENDED)
        fh.write("RESUME\n")
        fh.flush()
        runner.done.wait(5)
        assert runner.done.is_set()
        agent.shutdown()  # what a finishing rank does
        received = [fh.readline().rstrip("\n") for _ in range(3)]
    assert "OK" in received  # the RESUME acknowledgment was not lost
