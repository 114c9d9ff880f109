"""Task plans: local tasks and SMPC sub-tasks, and the equation-count auditor.

A plan is a DAG.  Local tasks run on one party's data with no
communication; SMPC sub-tasks combine per-party results with a commutative,
associative operator and may reveal their output.  Every revealed,
invertible output hands each party one equation in the other parties'
n(m-1) unknowns, so at most n(m-1) - 1 such outputs are allowed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedPlan, Underdetermined

COMBINERS = ("+", "*")


@dataclass
class LocalTask:
    name: str
    party_id: int | None = None
    description: str = ""


@dataclass
class SmpcSubTask:
    label: str
    combiner: str = "+"
    inputs: list[str] = field(default_factory=list)
    output_shape: tuple[int, ...] = (1,)
    reveals_output: bool = True
    irreversible: bool = False
    extra_unknowns: int = 0
    # Optional linear form of the revealed output over the stacked secrets
    # (party-major, one row per scalar equation); used by demonstrate_recovery.
    coefficients: list[list[float]] | None = None

    @property
    def name(self) -> str:
        return self.label

    @property
    def counts(self) -> bool:
        return self.reveals_output and not self.irreversible


@dataclass
class TaskPlan:
    nodes: list[LocalTask | SmpcSubTask] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)
    final_node: str | None = None
    # Number of times the combiner joins the parties' data (rule 2); the
    # plan may not contain more sub-tasks than that.
    combiner_uses: int | None = None
    name: str = ""

    def subtasks(self) -> list[SmpcSubTask]:
        return [nd for nd in self.nodes if isinstance(nd, SmpcSubTask)]

    def node(self, name: str):
        for nd in self.nodes:
            if nd.name == name:
                return nd
        raise MalformedPlan(f"no node named {name!r}")

    # serialization
    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            d = asdict(nd)
            d["kind"] = "smpc" if isinstance(nd, SmpcSubTask) else "local"
            if "output_shape" in d:
                d["output_shape"] = list(d["output_shape"])
            nodes.append(d)
        return {"name": self.name, "nodes": nodes, "edges": [list(e) for e in self.edges],
                "final_node": self.final_node, "combiner_uses": self.combiner_uses}

    @classmethod
    def from_dict(cls, data: dict) -> "TaskPlan":
        try:
            nodes: list[LocalTask | SmpcSubTask] = []
            for raw in data["nodes"]:
                raw = dict(raw)
                kind = raw.pop("kind")
                if kind == "smpc":
                    raw["output_shape"] = tuple(raw.get("output_shape", (1,)))
                    nodes.append(SmpcSubTask(**raw))
                elif kind == "local":
                    nodes.append(LocalTask(**raw))
                else:
                    raise MalformedPlan(f"unknown node kind {kind!r}")
            edges = [tuple(e) for e in data.get("edges", [])]
            if any(len(e) != 2 for e in edges):
                raise MalformedPlan("edges must be [src, dst] pairs")
            return cls(nodes, edges, data.get("final_node"), data.get("combiner_uses"), data.get("name", ""))
        except (KeyError, TypeError) as exc:
            raise MalformedPlan(f"bad plan document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TaskPlan":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise MalformedPlan(f"plan is not valid JSON: {exc}") from exc


def load_plan(path) -> TaskPlan:
    return TaskPlan.from_json(Path(path).read_text())


def save_plan(plan: TaskPlan, path) -> None:
    Path(path).write_text(plan.to_json())


# -- validation -------------------------------------------------------------

def _validate(plan: TaskPlan) -> dict[str, list[str]]:
    """Check structure and return the successor map."""
    names = [nd.name for nd in plan.nodes]
    if len(set(names)) != len(names):
        raise MalformedPlan("duplicate node names")
    known = set(names)
    succ: dict[str, list[str]] = {nm: [] for nm in names}
    for src, dst in plan.edges:
        if src not in known or dst not in known:
            raise MalformedPlan(f"edge {src!r} -> {dst!r} references an unknown node")
        succ[src].append(dst)
    for st in plan.subtasks():
        if st.combiner not in COMBINERS:
            raise MalformedPlan(f"sub-task {st.label!r}: unsupported combiner {st.combiner!r}")
        if st.extra_unknowns < 0:
            raise MalformedPlan(f"sub-task {st.label!r}: negative extra_unknowns")
        for inp in st.inputs:
            if inp not in known:
                raise MalformedPlan(f"sub-task {st.label!r}: unknown input {inp!r}")
    # cycle check (iterative DFS colouring)
    state = dict.fromkeys(names, 0)
    for start in names:
        if state[start]:
            continue
        stack = [(start, iter(succ[start]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                raise MalformedPlan(f"cycle through {nxt!r}")
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
    return succ


def count_equations(plan: TaskPlan) -> int:
    """Revealed sub-task outputs that are not marked irreversible."""
    _validate(plan)
    return sum(1 for st in plan.subtasks() if st.counts)


@dataclass
class LedgerEntry:
    label: str
    counted: bool
    unknowns: int
    solvable: bool


@dataclass
class AuditReport:
    m: int
    n: int
    k: int
    bound: int
    verdict: bool
    ledger: list[LedgerEntry]
    reasons: list[str]

    @property
    def passed(self) -> bool:
        return self.verdict

    def __str__(self) -> str:
        lines = [f"audit: m={self.m} n={self.n} k={self.k} bound={self.bound} "
                 f"verdict={'PASS' if self.verdict else 'FAIL'}"]
        for e in self.ledger:
            tag = "equation" if e.counted else "not counted"
            lines.append(f"  {e.label}: {tag}, unknowns={e.unknowns}{', SOLVABLE' if e.solvable else ''}")
        lines += [f"  reason: {r}" for r in self.reasons]
        return "\n".join(lines)


def audit(plan: TaskPlan, m: int, n: int) -> AuditReport:
    if m < 2 or n < 1:
        raise MalformedPlan(f"audit needs m >= 2 and n >= 1 (got m={m}, n={n})")
    succ = _validate(plan)
    base = n * (m - 1)
    bound = base - 1
    reasons: list[str] = []
    ledger = []
    for st in plan.subtasks():
        unknowns = base + st.extra_unknowns
        # one equation in a single unknown pins it down (rule 3)
        solvable = st.counts and unknowns <= 1
        ledger.append(LedgerEntry(st.label, st.counts, unknowns, solvable))
        if solvable:
            reasons.append(f"output of {st.label!r} reveals the other party's input")
    k = sum(e.counted for e in ledger)
    if k > bound:
        reasons.append(f"{k} revealed equations exceed the bound n(m-1)-1 = {bound}")
    if plan.combiner_uses is not None and len(ledger) > plan.combiner_uses:
        reasons.append(f"{len(ledger)} sub-tasks but the combiner is used only {plan.combiner_uses} times")
    if plan.final_node is None:
        reasons.append("plan has no final node")
    else:
        final = plan.node(plan.final_node)
        if not isinstance(final, SmpcSubTask):
            reasons.append(f"final node {plan.final_node!r} is not an SMPC sub-task")
        elif succ[final.name]:
            reasons.append(f"final node {plan.final_node!r} feeds other nodes")
        else:
            pred: dict[str, list[str]] = {nd.name: [] for nd in plan.nodes}
            for src, dst in plan.edges:
                pred[dst].append(src)
            seen, todo = {final.name}, [final.name]
            while todo:
                for p in pred[todo.pop()]:
                    if p not in seen:
                        seen.add(p)
                        todo.append(p)
            stray = [nd.name for nd in plan.nodes if nd.name not in seen]
            if stray:
                reasons.append(f"nodes not contributing to the final output: {', '.join(stray)}")
    return AuditReport(m, n, k, bound, not reasons, ledger, reasons)


def demonstrate_recovery(plan: TaskPlan, secrets, m: int, n: int, observer: int = 0) -> np.ndarray:
    """Red-team: solve for the other parties' inputs from one party's view.

    ``secrets`` is m x n.  Each counted sub-task contributes the rows of
    its ``coefficients``; the observer substitutes its own values and solves
    the remaining linear system.  Returns the recovered (m-1) x n inputs in
    party order, or raises Underdetermined.
    """
    secrets = np.asarray(secrets, dtype=np.float64).reshape(m, n)
    rows = []
    for st in plan.subtasks():
        if st.counts:
            if st.coefficients is None:
                raise MalformedPlan(f"sub-task {st.label!r} has no linear form")
            rows += [np.asarray(r, dtype=np.float64).reshape(m * n) for r in st.coefficients]
    unknown_cols = [i for i in range(m * n) if i // n != observer]
    if not rows:
        raise Underdetermined(f"no equations for {len(unknown_cols)} unknowns")
    a = np.vstack(rows)
    x = secrets.reshape(-1)
    rhs = a @ x  # the revealed outputs
    known_cols = [i for i in range(m * n) if i // n == observer]
    rhs = rhs - a[:, known_cols] @ x[known_cols]
    sub = a[:, unknown_cols]
    rank = np.linalg.matrix_rank(sub)
    if rank < len(unknown_cols):
        raise Underdetermined(f"rank {rank} system cannot fix {len(unknown_cols)} unknowns")
    sol, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
    return sol.reshape(m - 1, n)


# -- shipped plans ----------------------------------------------------------

def _local(m: int, name: str, desc: str) -> list[LocalTask]:
    return [LocalTask(f"{name}[{i}]", i, desc) for i in range(m)]


def pca_plan(m: int = 2, d: int = 6) -> TaskPlan:
    sums = _local(m, "column_sum", "incremental column sums and row count")
    covs = _local(m, "centered_gram", "incremental Gram about the revealed mean")
    mean = SmpcSubTask("cpt_tot_col_avg", "+", [t.name for t in sums], (d,), True, False, extra_unknowns=m)
    eig = SmpcSubTask("power_iteration", "+", [t.name for t in covs], (d + 1, d), True, False, extra_unknowns=m)
    edges = [(t.name, mean.label) for t in sums] + [(mean.label, t.name) for t in covs]
    edges += [(t.name, eig.label) for t in covs]
    return TaskPlan(sums + covs + [mean, eig], edges, eig.label, combiner_uses=2, name="pca")


def svd_plan(m: int = 2, d: int = 6) -> TaskPlan:
    grams = _local(m, "gram", "incremental local Gram matrix")
    # Only singular values and the right factor leave the sub-task; the
    # left factor is withheld, so the Gram matrix cannot be rebuilt.
    eig = SmpcSubTask("singular_value_and_matrix", "+", [t.name for t in grams], (d + 1, d), True, True)
    edges = [(t.name, eig.label) for t in grams]
    return TaskPlan(grams + [eig], edges, eig.label, combiner_uses=1, name="svd")


def fa_plan(m: int = 2, d: int = 6) -> TaskPlan:
    sums = _local(m, "column_sum", "incremental column sums and row count")
    covs = _local(m, "centered_gram", "incremental Gram about the revealed mean")
    mean = SmpcSubTask("cpt_tot_col_avg", "+", [t.name for t in sums], (d,), True, False, extra_unknowns=m)
    # covariance -> correlation discards the scales: irreversible
    load = SmpcSubTask("factor_loading_matrix", "+", [t.name for t in covs], (d + 1, d), True, True,
                       extra_unknowns=m)
    edges = [(t.name, mean.label) for t in sums] + [(mean.label, t.name) for t in covs]
    edges += [(t.name, load.label) for t in covs]
    return TaskPlan(sums + covs + [mean, load], edges, load.label, combiner_uses=2, name="fa")


def variance_plan(m: int = 2) -> TaskPlan:
    """Mean sub-task then sum-of-squared-deviations sub-task."""
    sums = _local(m, "sum", "s_i = sum of own values")
    sq = _local(m, "sq_dev", "sum of squared deviations from the mean")
    mean = SmpcSubTask("mean", "+", [t.name for t in sums])
    out = SmpcSubTask("sum_sq_dev", "+", [t.name for t in sq])
    edges = [(t.name, "mean") for t in sums] + [("mean", t.name) for t in sq] + [(t.name, "sum_sq_dev") for t in sq]
    return TaskPlan(sums + sq + [mean, out], edges, "sum_sq_dev", combiner_uses=2, name="variance")


def average_plan(m: int) -> TaskPlan:
    """Average of one number per party: a single revealed linear equation."""
    locs = _local(m, "money", "own amount")
    avg = SmpcSubTask("average", "+", [t.name for t in locs], coefficients=[[1.0 / m] * m])
    return TaskPlan(locs + [avg], [(t.name, "average") for t in locs], "average", combiner_uses=1, name="average")


def linear_plan(coefficient_rows, m: int, n: int, irreversible=None) -> TaskPlan:
    """One sub-task per coefficient row over the m*n stacked secrets."""
    locs = _local(m, "input", "own parameters")
    subs = []
    for i, row in enumerate(coefficient_rows):
        if len(row) != m * n:
            raise MalformedPlan(f"row {i} has {len(row)} coefficients, expected {m * n}")
        irr = bool(irreversible[i]) if irreversible is not None else False
        subs.append(SmpcSubTask(f"eq{i}", "+", [t.name for t in locs], irreversible=irr,
                                coefficients=[list(map(float, row))]))
    edges = [(t.name, s.label) for s in subs for t in locs]
    edges += [(subs[i].label, subs[i + 1].label) for i in range(len(subs) - 1)]
    return TaskPlan(locs + subs, edges, subs[-1].label if subs else None, name="linear")


SHIPPED_PLANS = {"pca": pca_plan, "svd": svd_plan, "fa": fa_plan}
