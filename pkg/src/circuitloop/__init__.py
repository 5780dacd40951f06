"""circuitloop: closed-loop analog design generation, checking, and memory.

The package wires a generate -> simulate -> diagnose -> remember loop around
a small SPICE-subset netlist language and an embedded MNA simulator.  Each
module stands alone: netlist (parse/emit), sim (analyses), checks (static
structure rules), verify (the staged pipeline), memory (the persistent rule
playbook), agents (prompt assembly + backends), tune (TPE parameter search),
orchestrate (the loop itself), evalkit (Pass@k / CSR / TTFS reporting).
"""

__version__ = "0.1.0"
