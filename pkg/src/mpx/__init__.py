"""mpx: launch, debug, and profile small message-passing programs.

Subsystems:
  harness       rank runtime (multicore threads / cluster TCP) with probe hooks
  launcher      mpxrun: placement, debug ports, mpjdev.conf, process control
  debug_agent   in-process MDWP text-protocol server with cooperative checkpoints
  debug_client  mpxdbg: multi-rank attach, scripting, HTTP/SSE gateway
  profiler      per-thread inclusive/exclusive timing, profile/trace files
  prof_cli      mpxprof: aggregation, validation, trace merging
  bench         ping-pong and EP benchmarks plus overhead reports
"""

__version__ = "0.1.0"
