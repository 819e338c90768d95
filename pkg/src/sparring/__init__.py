"""Sparring: a human-in-the-loop LLM privilege-escalation agent.

The package closes the feedback loop between a chat model and a target
Linux machine (real over SSH, or a deterministic simulated profile),
records every step to an append-only protocol, and exposes runs through
a local control plane for an operator console.
"""

__version__ = "0.1.0"
