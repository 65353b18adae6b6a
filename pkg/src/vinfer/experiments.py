"""Scenario files, Monte Carlo harnesses, payoff accounting and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
import jsonschema
import numpy as np

from . import pipeline
from .bitstats import OFF_CHAIN, accept, compare_arrays, mantissa_diffs
from .clustering import (
    GameParams,
    dishonest_accept_upper_bound,
    honest_accept_lower_bound,
    monte_carlo,
)
from .commitments import MerkleTree, commit_verdict, merkle_verify
from .contract import Contract, ContractConfig, Economics, Verdict, ZkOracle
from .errors import ScenarioError, VinferError
from .identity import KeyPair, Ledger, RegistryConfig, stake_account, wallet
from .randomness import derive_seed
from .scheduler import (
    Scheduler,
    TaskRequest,
    VerifierAgent,
    Worker,
    derive_noise,
)

# schema ------------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_ASSERTION = {
    "type": "object",
    "required": ["metric", "op", "value"],
    "properties": {"metric": {"type": "string"}, "op": {"enum": [">", ">=", "<", "<=", "=="]}, "value": _NUM},
    "additionalProperties": False,
}
SCENARIO_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "kind", "trials"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": ["protocol", "game", "detection", "cost"]},
        "trials": {"type": "integer", "minimum": 1},
        "seed": _INT,
        "model": {
            "type": "object",
            "properties": {"L": {"type": "integer", "minimum": 1}, "d": {"type": "integer", "minimum": 4},
                           "layers_per_segment": {"type": "integer", "minimum": 1}, "seed": _INT},
            "additionalProperties": False,
        },
        "noise": {
            "type": "object",
            "properties": {"rel_scale": {"type": "number", "minimum": 0},
                           "flip_prob": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "prompt": {
            "type": "object",
            "properties": {"length": {"type": "integer", "minimum": 1},
                           "max_tokens": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "committee": {
            "type": "object",
            "properties": {"k": {"type": "integer", "minimum": 1}, "tau": {"type": "number", "exclusiveMinimum": 0,
                                                                           "maximum": 1},
                           "delta": {"type": "number", "exclusiveMinimum": 0},
                           "sample_size": {"type": "integer", "minimum": 1},
                           "group_size": {"type": "integer", "minimum": 2},
                           "dispute_m": {"type": "integer", "minimum": 2}},
            "additionalProperties": False,
        },
        "economics": {
            "type": "object",
            "properties": {"r_inf": _INT, "verify_cost": _INT, "r_ver": _INT, "slash": _INT,
                           "slash_inf": _INT, "stake": _INT, "inference_cost": _INT},
            "additionalProperties": False,
        },
        "adversary": {
            "type": "object",
            "properties": {
                "attack": {"enum": ["identity", "quantize", "early_stop", "forged_output", "lazy"]},
                "bits": {"type": "integer", "minimum": 2, "maximum": 16},
                "stop_at": {"type": "integer", "minimum": 1},
                "verifiers": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
            },
            "additionalProperties": False,
        },
        "network": {
            "type": "object",
            "properties": {"drop_prob": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "game": {
            "type": "object",
            "properties": {"n": _INT, "q": _INT, "eps1": _NUM, "eps2": _NUM, "r": _NUM,
                           "policy": {"enum": ["random_guess", "colluding"]},
                           "grid": {"type": "array", "items": {"type": "object"}}},
            "additionalProperties": False,
        },
        "layers": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "assertions": {"type": "array", "items": _ASSERTION},
    },
    "additionalProperties": False,
}

SUITE_SCHEMA: dict = {
    "type": "object",
    "required": ["scenarios"],
    "properties": {"scenarios": {"type": "array", "minItems": 1, "items": SCENARIO_SCHEMA}},
    "additionalProperties": False,
}


@dataclass
class Scenario:
    name: str
    kind: str
    trials: int
    seed: int = 0
    model: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    prompt: dict = field(default_factory=dict)
    committee: dict = field(default_factory=dict)
    economics: dict = field(default_factory=dict)
    adversary: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    game: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)
    assertions: list = field(default_factory=list)

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        try:
            jsonschema.validate(obj, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ScenarioError(f"scenario invalid: {exc.message}") from None
        return cls(**obj)

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    # derived configuration ---------------------------------------------------------

    def model_config(self) -> pipeline.ModelConfig:
        m = self.model
        return pipeline.ModelConfig(n_segments=m.get("L", 4), hidden_dim=m.get("d", 32),
                                    layers_per_segment=m.get("layers_per_segment", 1), seed=m.get("seed", 0))

    def noise_model(self) -> pipeline.NoiseModel:
        d = pipeline.DEFAULT_NOISE
        return pipeline.NoiseModel(self.noise.get("rel_scale", d.rel_scale), self.noise.get("flip_prob", d.flip_prob))

    def attack(self) -> pipeline.Attack:
        a = self.adversary.get("attack", "identity")
        if a == "quantize":
            return pipeline.quantize(self.adversary.get("bits", 8))
        if a == "early_stop":
            return pipeline.early_stop(self.adversary.get("stop_at", 8))
        if a == "forged_output":
            return pipeline.forged_output()
        return pipeline.IDENTITY

    def contract_economics(self) -> Economics:
        keys = ("r_inf", "verify_cost", "r_ver", "slash", "slash_inf")
        return Economics(**{k: self.economics[k] for k in keys if k in self.economics})

    def game_params(self) -> GameParams:
        g = self.game
        return GameParams(n=g.get("n", 6), q=g.get("q", 4), eps1=g.get("eps1", 0.01), eps2=g.get("eps2", 0.01),
                          r=g.get("r", 0.8))


def load_scenarios(path: str | Path) -> list[Scenario]:
    """A file holds one scenario object or ``{"scenarios": [...]}``."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: malformed JSON ({exc.msg})") from None
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from None
    items = obj.get("scenarios", [obj]) if isinstance(obj, dict) else None
    if not isinstance(items, list) or not items:
        raise ScenarioError(f"{path}: expected a scenario or a list of scenarios")
    return [Scenario.from_json(o) for o in items]


def bundled_scenario_path(name: str) -> Path:
    return Path(str(resources.files("vinfer") / "scenarios" / name))


# statistics ----------------------------------------------------------------------

@dataclass(frozen=True)
class Rate:
    successes: int
    trials: int

    @property
    def value(self) -> float:
        return self.successes / self.trials if self.trials else float("nan")

    @property
    def ci(self) -> tuple[float, float]:
        return wilson_interval(self.successes, self.trials)

    def to_json(self) -> dict:
        lo, hi = self.ci
        return {"successes": self.successes, "trials": self.trials, "rate": round(self.value, 6),
                "ci95": [round(lo, 6), round(hi, 6)]}


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


# protocol trials ------------------------------------------------------------------

DEFAULT_STAKE = 1000
TREASURY_RESERVE = 10 ** 9


@dataclass
class World:
    model: pipeline.ModelConfig
    contract: Contract
    scheduler: Scheduler
    workers: dict[str, Worker]
    oracle: ZkOracle


def build_world(sc: Scenario, seed: int) -> World:
    mc = sc.model_config()
    com = sc.committee
    k = com.get("k", 6)
    group_size = com.get("group_size", k + 1)
    stake = sc.economics.get("stake", DEFAULT_STAKE)
    oracle = ZkOracle(KeyPair.derive("zk-oracle", seed))
    cfg = ContractConfig(
        economics=sc.contract_economics(),
        registry=RegistryConfig(min_stake=stake // 2, withdrawal_delay=10, k_min=0),
        tau=com.get("tau", 0.7), delta=com.get("delta", ContractConfig.delta),
        sample_size=com.get("sample_size", 16), oracle_public=oracle.public)
    ids = [f"n{i}.{j}" for i in range(1, mc.n_segments + 1) for j in range(group_size)]
    balances = {wallet(x): stake + 1000 for x in ids + ["sched"]}
    balances[Ledger.TREASURY] = TREASURY_RESERVE
    contract = Contract(cfg, balances)
    base = sc.noise_model()
    workers = {}
    for x in ids:
        stage = int(x[1:].split(".")[0])
        kp = KeyPair.derive(x, seed)
        contract.register(x, kp.public, mc.model_id, mc.slice_of(stage), stake)
        workers[x] = Worker(x, kp, mc, derive_noise(base, x, seed))
    skp = KeyPair.derive("sched", seed)
    contract.register("sched", skp.public, "", (0, 0), stake, role="scheduler")
    sched = Scheduler("sched", skp, contract.registry, mc, workers, k)
    return World(mc, contract, sched, workers, oracle)


def stage_tainted(attack: pipeline.Attack, stage: int, n_segments: int) -> bool:
    """Ground truth for the oracle: did this stage's published output deviate?"""
    if attack.kind == "quantize":
        return attack.applies_to(stage)
    if attack.kind in ("early_stop", "forged_output"):
        return stage == n_segments
    return False


INFERENCE_COST_FACTOR = {"identity": 1.0, "quantize": 0.5, "early_stop": 0.5, "forged_output": 0.1}


@dataclass
class TrialRecord:
    trial: int
    verdicts: list[str]
    detected: bool
    accepted: bool
    payoffs: dict[str, list[float]]
    lazy_attempts: int = 0
    lazy_successes: int = 0
    zk_flips: int = 0
    disputes: int = 0
    conserved: bool = True
    error: str = ""
    log: str = ""


def _behaviors(sc: Scenario, committee: tuple[str, ...]) -> dict[str, str]:
    out = {v: "honest" for v in committee}
    pos = 0
    spec = dict(sc.adversary.get("verifiers", {}))
    if sc.adversary.get("attack") == "lazy":
        spec.setdefault("lazy", 1)
    for behavior in sorted(spec):
        for _ in range(spec[behavior]):
            if pos < len(committee):
                out[committee[pos]] = behavior
                pos += 1
    return out


def _verify_rounds(world: World, transcript, rids: list[int], agents: dict[str, VerifierAgent],
                   rng: np.random.Generator, drop_prob: float, rec: TrialRecord) -> None:
    """Commit, sample, reveal and adjudicate rounds in lockstep, as parallel committees would."""
    c = world.contract
    orders = world.scheduler.dispatch_verification(transcript)
    by_stage = {s: o for (s, _), o in orders.items()}
    reports = {}
    for rid in rids:
        rnd = c.round(rid)
        for v in rnd.committee:
            # reconsideration committees receive the same stage order
            order = orders.get((rnd.stage, v), by_stage[rnd.stage])
            report = agents[v].process(order, transcript)
            reports[rid, v] = report
            if rng.random() < drop_prob:
                continue
            c.submit_verdict_commitment(rid, v, commit_verdict(report.b, report.salt).digest,
                                        report.tree.root, report.tree.leaf_count)
    if any(c.round(r).phase.value == "commit" for r in rids):
        c.advance(c.config.commit_window)
    for rid in rids:
        if not c.round(rid).commitments:
            c.close_commit(rid)
        pkg = world.scheduler.publish_samples(c, rid, transcript)
        indices = c.check_sampling_package(rid, pkg)
        rnd = c.round(rid)
        for v in rnd.committee:
            if v not in rnd.commitments:
                continue
            agent, report = agents[v], reports[rid, v]
            try:
                c.reveal(rid, v, report.b, report.salt, agent.openings(report, indices, pkg), report.tail_token)
                ok = True
            except VinferError:
                ok = False
            if agent.behavior == "lazy":
                rec.lazy_attempts += 1
                rec.lazy_successes += ok
    if any(len(c.round(r).reveals) < len(c.round(r).commitments) for r in rids):
        c.advance(c.config.reveal_window)
    for rid in rids:
        c.adjudicate(rid)


def run_protocol_trial(sc: Scenario, trial: int, keep_log: bool = False) -> TrialRecord:
    seed = derive_seed(sc.seed, sc.name, trial)
    rng = np.random.default_rng(seed)
    world = build_world(sc, seed)
    c = world.contract
    mc = world.model
    attack = sc.attack()
    drop = sc.network.get("drop_prob", 0.0)
    plen = sc.prompt.get("length", 8)
    prompt = tuple(int(x) for x in rng.integers(1, mc.vocab_size, size=plen))
    request = TaskRequest(mc.model_id, prompt, sc.prompt.get("max_tokens", 16), nonce=trial)
    start = c.ledger.snapshot()
    total0 = c.ledger.total()
    rec = TrialRecord(trial, [], False, True, {})
    assignment = world.scheduler.assign_roles(request)
    transcript = world.scheduler.run_inference(assignment, request, attack=attack)
    agents: dict[str, VerifierAgent] = {}
    behaviors: dict[str, str] = {}
    for s in assignment.stages:
        b = _behaviors(sc, s.verifiers)
        behaviors.update(b)
    for nid, w in world.workers.items():
        agents[nid] = VerifierAgent(w, behaviors.get(nid, "honest"), collusion_seed=seed)
    T = transcript.result.n_steps
    rids = []
    for s in assignment.stages:  # every stage root goes on chain before any adjudication
        final = transcript.record(s.stage, T)
        claimed = transcript.tokens[-1] if s.stage == mc.n_segments else None
        rids.append(c.open_round(request.task_hash, s.stage, mc.model_id, assignment.k, "sched", s.vrf,
                                 final.root, final.leaf_count, T, final.inf_sig, claimed))
    _verify_rounds(world, transcript, rids, agents, rng, drop, rec)
    for s, rid in zip(assignment.stages, rids):
        rnd = c.round(rid)
        verdict = rnd.outcome.verdict
        tainted = stage_tainted(attack, s.stage, mc.n_segments)
        if verdict is Verdict.AMBIGUOUS:
            provers = [v for v in rnd.committee if v in rnd.reveals and rnd.reveals[v].b == 0]
            proof = world.oracle.prove(rnd.task_hash, rnd.stage, rnd.inf_root, not tainted)
            if provers and proof is not None:
                c.submit_zk_proof(rid, provers[0], proof)
                rec.zk_flips += 1
                verdict = Verdict.REJECT
        if verdict is Verdict.REJECT and not tainted and "dispute_m" in sc.committee:
            m2 = sc.committee["dispute_m"]
            child = c.dispute(rid, m2, world.scheduler.dispute_vrf(c, rid, m2))
            rec.disputes += 1
            _verify_rounds(world, transcript, [child], agents, rng, 0.0, rec)
            verdict = c.round(child).outcome.verdict
            if verdict is Verdict.AMBIGUOUS:
                verdict = Verdict.ACCEPT
            c.finalize(child)
        elif c.round(rid).phase.value == "adjudicated":
            c.finalize(rid)
        rec.verdicts.append(verdict.value)
    rec.detected = Verdict.REJECT.value in rec.verdicts
    rec.accepted = not rec.detected
    end = c.ledger.snapshot()
    rec.conserved = c.ledger.total() == total0

    def gain(node: str) -> int:
        return sum(end.get(a, 0) - start.get(a, 0) for a in (wallet(node), stake_account(node)))

    inf_cost = sc.economics.get("inference_cost", 20)
    for s in assignment.stages:
        tainted = stage_tainted(attack, s.stage, mc.n_segments)
        label = f"inferencer:{attack.kind if tainted else 'identity'}"
        cost = inf_cost * (INFERENCE_COST_FACTOR[attack.kind] if tainted else 1.0)
        rec.payoffs.setdefault(label, []).append(gain(s.inferencer) - cost)
    vcost = c.config.economics.verify_cost
    for nid, behavior in sorted(behaviors.items()):
        cost = 0 if behavior == "lazy" else vcost
        rec.payoffs.setdefault(f"verifier:{behavior}", []).append(gain(nid) - cost)
    for r in c.rounds.values():
        if r.parent is not None:
            for v in r.committee:
                rec.payoffs.setdefault("verifier:reconsideration", []).append(gain(v) - vcost)
    if keep_log:
        rec.log = c.dump_log()
    return rec


# detection trials (pipeline level) ---------------------------------------------------

def detection_trial(sc: Scenario, trial: int) -> tuple[bool, bool]:
    """Returns (applicable, detected) for one attacked generation checked by honest verifiers."""
    seed = derive_seed(sc.seed, sc.name, trial)
    rng = np.random.default_rng(seed)
    mc = sc.model_config()
    base = sc.noise_model()
    inf_noise = base.with_seed(derive_seed(seed, "inferencer"))
    ver_noise = base.with_seed(derive_seed(seed, "verifier"))
    prompt = [int(x) for x in rng.integers(1, mc.vocab_size, size=sc.prompt.get("length", 8))]
    T = sc.prompt.get("max_tokens", 32)
    kind = sc.adversary.get("attack", "identity")
    if kind == "lazy":
        truth = rng.standard_normal((1, mc.hidden_dim)).astype(np.float32)
        guess_tree = MerkleTree.from_values(np.zeros_like(truth))
        idx = int(rng.integers(truth.size))
        proof = MerkleTree.from_values(truth).open(idx)
        return True, not merkle_verify(guess_tree.root, proof, guess_tree.leaf_count)
    if kind == "early_stop":
        stop_at = int(rng.integers(1, T)) if "stop_at" not in sc.adversary else sc.adversary["stop_at"]
        res = pipeline.generate(mc, prompt, T, inf_noise, pipeline.early_stop(stop_at))
        if res.n_steps < stop_at:
            return False, False  # natural EOS came first; nothing was cut
        tail = res.stage_output(mc.n_segments)
        if pipeline.decode_step(mc, tail[-1]) == mc.eos_id:
            return False, False  # the forced token equals the natural one
        chk = pipeline.check_stage(mc, res, mc.n_segments, ver_noise)
        return True, not chk.tokens_ok
    if kind == "forged_output":
        res = pipeline.generate(mc, prompt, T, inf_noise, pipeline.forged_output())
        chk = pipeline.check_stage(mc, res, mc.n_segments, ver_noise)
        return True, not chk.verdict
    attack = sc.attack()
    res = pipeline.generate(mc, prompt, T, inf_noise, attack)
    for stage in range(1, mc.n_segments + 1):
        if not pipeline.check_stage(mc, res, stage, ver_noise).verdict:
            return True, True
    return True, False


# cost accounting -------------------------------------------------------------------

def cost_ratios(layers: list[int], total_layers: int = 8, d: int = 32, prompt_len: int = 8,
                max_tokens: int = 16, seed: int = 0) -> list[dict]:
    """Per-verifier verify-prefill ops vs a full-model prefill over the same sequence."""
    rows = []
    for L in layers:
        if total_layers % L:
            raise ScenarioError(f"{total_layers} layers cannot be split into {L} segments")
        mc = pipeline.ModelConfig(n_segments=L, hidden_dim=d, layers_per_segment=total_layers // L, seed=seed)
        rng = np.random.default_rng([seed, L])
        prompt = [int(x) for x in rng.integers(1, mc.vocab_size, size=prompt_len)]
        gen_meter = pipeline.CostMeter()
        res = pipeline.generate(mc, prompt, max_tokens, meter=gen_meter)
        full = pipeline.CostMeter()
        x = res.stage_input(1)
        for i in range(1, L + 1):
            x = pipeline.segment_forward(mc.segment(i), x, meter=full, phase="prefill")
        ver = pipeline.CostMeter()
        for i in range(1, L + 1):
            pipeline.verify_prefill(mc.segment(i), res.stage_input(i), meter=ver)
        per_verifier = ver.total("verify_prefill", 1)
        rows.append({
            "L": L, "steps": res.n_steps, "full_prefill_ops": full.total("prefill"),
            "per_verifier_ops": per_verifier, "ratio": per_verifier / full.total("prefill"),
            "target": 1.0 / L, "all_verify_over_generation": ver.total() / gen_meter.total(),
        })
    return rows


# clustering-game bounds ---------------------------------------------------------------

def bounds_check(grid: list[GameParams], trials: int, seed: int = 0, policy: str = "random_guess") -> list[dict]:
    """Monte Carlo vs analytic bounds with a 3-sigma allowance.

    Reports in one round are accepted or rejected together, so sigma uses the
    number of rounds rather than the number of reports as the sample size.
    """
    out = []
    for g in grid:
        mc = monte_carlo(g, trials, seed=derive_seed(seed, g.n, g.q, g.eps1, g.eps2, g.r), policy=policy)
        lo = honest_accept_lower_bound(g)
        ub = dishonest_accept_upper_bound(g)
        sh = 3 * math.sqrt(max(lo * (1 - lo), 1e-12) / trials)
        sd = 3 * math.sqrt(max(ub.total * (1 - ub.total), 1e-12) / trials)
        ok_h = mc.honest_rate >= lo - sh
        ok_d = mc.dishonest_rate <= ub.total + sd
        out.append({
            "n": g.n, "q": g.q, "eps1": g.eps1, "eps2": g.eps2, "r": g.r,
            "honest_bound": lo, "honest_mc": mc.honest_rate, "dishonest_bound": ub.total,
            "dishonest_mc": mc.dishonest_rate, "consensus_rate": mc.consensus_rate,
            "honest_given_consensus": mc.honest_rate_given_consensus,
            "dishonest_given_consensus": mc.dishonest_rate_given_consensus,
            "pass": bool(ok_h and ok_d),
        })
    return out


def default_grid() -> list[GameParams]:
    grid = []
    for n in range(4, 11):
        for q in sorted({n // 2 + 1, n - 1}):
            for eps in (0.0, 0.01, 0.05):
                for r in (0.5, 0.8, 0.95):
                    grid.append(GameParams(n=n, q=q, eps1=eps, eps2=eps, r=r))
    return grid


# reports ------------------------------------------------------------------------

@dataclass
class Report:
    scenario: str
    kind: str
    trials: int
    metrics: dict[str, float] = field(default_factory=dict)
    rates: dict[str, Rate] = field(default_factory=dict)
    payoffs: dict[str, float] = field(default_factory=dict)
    table: list[dict] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    assertions: list[dict] = field(default_factory=list)
    errors: int = 0
    logs: dict[int, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a["pass"] for a in self.assertions)

    def summary(self) -> dict:
        return {
            "scenario": self.scenario, "kind": self.kind, "trials": self.trials,
            "metrics": {k: _round(v) for k, v in sorted(self.metrics.items())},
            "rates": {k: v.to_json() for k, v in sorted(self.rates.items())},
            "payoffs": {k: _round(v) for k, v in sorted(self.payoffs.items())},
            "table": [{k: _round(v) for k, v in row.items()} for row in self.table],
            "assertions": self.assertions, "errors": self.errors, "pass": self.passed,
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / f"{self.scenario}.json"]
        paths[0].write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        for label, rows in (("trials", self.rows), ("table", self.table)):
            if rows:
                p = d / f"{self.scenario}.{label}.csv"
                _write_csv(p, rows)
                paths.append(p)
        for trial, log in sorted(self.logs.items()):
            p = d / f"{self.scenario}.trial{trial:04d}.log.jsonl"
            p.write_text(log)
            paths.append(p)
        return paths


def _round(v):
    if isinstance(v, float):
        return round(v, 9)
    return v


def _write_csv(path: Path, rows: list[dict]) -> None:
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _round(row.get(k)) for k in keys})


_OPS = {">": lambda a, b: a > b, ">=": lambda a, b: a >= b, "<": lambda a, b: a < b,
        "<=": lambda a, b: a <= b, "==": lambda a, b: a == b}


def _check_assertions(report: Report, assertions: list[dict]) -> None:
    for a in assertions:
        value = report.metrics.get(a["metric"])
        ok = value is not None and _OPS[a["op"]](value, a["value"])
        report.assertions.append({"metric": a["metric"], "op": a["op"], "value": a["value"],
                                  "observed": _round(value), "pass": bool(ok)})


def run_scenario(sc: Scenario, trials: int | None = None, seed: int | None = None, keep_logs: int = 0) -> Report:
    """Run every trial of a scenario and evaluate its embedded assertions."""
    if trials is not None:
        sc = Scenario(**{**sc.__dict__, "trials": trials})
    if seed is not None:
        sc = Scenario(**{**sc.__dict__, "seed": seed})
    if sc.trials < 1:
        raise ScenarioError("trials must be >= 1")
    report = Report(sc.name, sc.kind, sc.trials)
    if sc.kind == "game":
        _run_game(sc, report)
    elif sc.kind == "detection":
        _run_detection(sc, report)
    elif sc.kind == "cost":
        _run_cost(sc, report)
    else:
        _run_protocol(sc, report, keep_logs)
    _check_assertions(report, sc.assertions)
    return report


def _run_game(sc: Scenario, report: Report) -> None:
    g = sc.game_params()
    policy = sc.game.get("policy", "random_guess")
    mc = monte_carlo(g, sc.trials, seed=sc.seed, policy=policy)
    ub = dishonest_accept_upper_bound(g)
    report.metrics.update({
        "honest_bound": honest_accept_lower_bound(g), "p_d1": ub.p_d1, "p_d2": ub.p_d2, "p_d3": ub.p_d3,
        "dishonest_total": ub.total, "dishonest_naive_total": ub.naive_total,
        "honest_rate": mc.honest_rate, "dishonest_rate": mc.dishonest_rate, "consensus_rate": mc.consensus_rate,
        "honest_rate_given_consensus": mc.honest_rate_given_consensus,
        "dishonest_rate_given_consensus": mc.dishonest_rate_given_consensus,
    })
    report.rates["honest_accept"] = Rate(mc.honest_accepted, mc.honest_reports)
    report.rates["dishonest_accept"] = Rate(mc.dishonest_accepted, mc.dishonest_reports)
    if "grid" in sc.game:
        grid = [GameParams(**{**{"n": 6, "q": 4, "eps1": 0.01, "eps2": 0.01, "r": 0.8}, **p}) for p in sc.game["grid"]]
        report.table = bounds_check(grid, sc.trials, sc.seed, policy)
        report.metrics["grid_pass_rate"] = sum(r["pass"] for r in report.table) / len(report.table)


def _run_detection(sc: Scenario, report: Report) -> None:
    applicable = detected = 0
    for t in range(sc.trials):
        ok, hit = detection_trial(sc, t)
        applicable += ok
        detected += hit
        report.rows.append({"trial": t, "applicable": int(ok), "detected": int(hit)})
    report.rates["detection"] = Rate(detected, applicable)
    report.metrics["detection_rate"] = detected / applicable if applicable else float("nan")
    report.metrics["applicable"] = applicable


def _run_cost(sc: Scenario, report: Report) -> None:
    m = sc.model
    report.table = cost_ratios(sc.layers or [2, 4, 8], 8, m.get("d", 32), sc.prompt.get("length", 8), sc.prompt.get("max_tokens", 16),
                               m.get("seed", 0))
    report.metrics["max_ratio_error"] = max(abs(r["ratio"] * r["L"] - 1.0) for r in report.table)


def _run_protocol(sc: Scenario, report: Report, keep_logs: int = 0) -> None:
    payoffs: dict[str, list[float]] = {}
    detected = accepted = lazy_a = lazy_s = zk = disputes = conserved = 0
    for t in range(sc.trials):
        try:
            rec = run_protocol_trial(sc, t, keep_log=t < keep_logs)
        except VinferError as exc:
            report.errors += 1
            report.rows.append({"trial": t, "verdicts": "", "detected": 0, "accepted": 0, "zk_flips": 0,
                                "disputes": 0, "error": f"{type(exc).__name__}: {exc}"})
            continue
        if rec.log:
            report.logs[t] = rec.log
        detected += rec.detected
        accepted += rec.accepted
        lazy_a += rec.lazy_attempts
        lazy_s += rec.lazy_successes
        zk += rec.zk_flips
        disputes += rec.disputes
        conserved += rec.conserved
        for k, v in rec.payoffs.items():
            payoffs.setdefault(k, []).extend(v)
        report.rows.append({"trial": t, "verdicts": "|".join(rec.verdicts), "detected": int(rec.detected),
                            "accepted": int(rec.accepted), "zk_flips": rec.zk_flips, "disputes": rec.disputes,
                            "error": ""})
    n = sc.trials - report.errors
    report.rates["inferencer_accepted"] = Rate(accepted, n)
    report.rates["inferencer_detected"] = Rate(detected, n)
    report.metrics.update({
        "accept_rate": accepted / n if n else float("nan"),
        "detection_rate": detected / n if n else float("nan"),
        "zk_flips": zk, "disputes": disputes, "errors": report.errors,
        "conservation_rate": conserved / n if n else float("nan"),
    })
    if lazy_a:
        report.rates["lazy_opening_success"] = Rate(lazy_s, lazy_a)
        report.metrics["lazy_success_rate"] = lazy_s / lazy_a
    for k, v in payoffs.items():
        report.payoffs[k] = float(np.mean(v))
        report.metrics[f"payoff:{k}"] = float(np.mean(v))


# payoff table -----------------------------------------------------------------------

def payoff_table(reports: list[Report], baseline: str = "honest") -> list[dict]:
    """Each deviation's mean payoff beside the honest strategy for the same role."""
    base = next((r for r in reports if r.scenario == baseline), None)
    if base is None:
        raise ScenarioError(f"no baseline scenario named {baseline!r}")
    honest = {"inferencer": base.payoffs.get("inferencer:identity"),
              "verifier": base.payoffs.get("verifier:honest")}
    rows = []
    for r in reports:
        for label, value in sorted(r.payoffs.items()):
            role, strategy = label.split(":", 1)
            if strategy in ("identity", "honest", "reconsideration"):
                continue
            ref = honest[role]
            rows.append({"scenario": r.scenario, "role": role, "strategy": strategy, "payoff": value,
                         "honest_payoff": ref, "margin": ref - value, "honest_dominates": bool(ref > value)})
    return rows


def default_scenarios(trials: int = 40, seed: int = 0) -> list[Scenario]:
    path = bundled_scenario_path("default-set.json")
    scs = load_scenarios(path)
    return [Scenario(**{**s.__dict__, "trials": trials, "seed": seed}) for s in scs]


# calibration -------------------------------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    rel_scale: float
    honest_pass: float
    quantized_pass: float
    iterations: int


def _pass_rates(mc, noise: pipeline.NoiseModel, trials: int, seed: int, bits: int) -> tuple[float, float]:
    honest = quant = 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        prompt = [int(x) for x in rng.integers(1, mc.vocab_size, size=8)]
        a = noise.with_seed(derive_seed(seed, t, "a"))
        b = noise.with_seed(derive_seed(seed, t, "b"))
        res = pipeline.generate(mc, prompt, 8, a)
        stage = 1 + t % mc.n_segments
        honest += pipeline.check_stage(mc, res, stage, b).states_ok
        q = pipeline.generate(mc, prompt, 8, a, pipeline.quantize(bits))
        quant += pipeline.check_stage(mc, q, stage, b).states_ok
    return honest / trials, quant / trials


def calibrate_noise(mc: pipeline.ModelConfig | None = None, trials: int = 200, seed: int = 0,
                    target: float = 0.999, bits: int = 8, flip_prob: float = pipeline.DEFAULT_NOISE.flip_prob,
                    lo: float = 1e-9, hi: float = 1e-3, iterations: int = 12) -> Calibration:
    """Binary search (in log scale) for the largest relative noise that keeps honest traces accepted."""
    mc = mc or pipeline.ModelConfig()
    best = (lo, *_pass_rates(mc, pipeline.NoiseModel(lo, flip_prob), trials, seed, bits))
    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        h, q = _pass_rates(mc, pipeline.NoiseModel(mid, flip_prob), trials, seed, bits)
        if h >= target and q <= 1 - target:
            lo, best = mid, (mid, h, q)
        else:
            hi = mid
    return Calibration(best[0], best[1], best[2], iterations)


def estimate_delta(mc: pipeline.ModelConfig | None = None, noise: pipeline.NoiseModel = pipeline.DEFAULT_NOISE,
                   trials: int = 50, seed: int = 0) -> float:
    """Three standard deviations of honest per-scalar significand drift (flip events excluded)."""
    mc = mc or pipeline.ModelConfig()
    diffs = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        prompt = [int(x) for x in rng.integers(1, mc.vocab_size, size=8)]
        res = pipeline.generate(mc, prompt, 8, noise.with_seed(derive_seed(seed, t, "a")))
        stage = 1 + t % mc.n_segments
        rows = pipeline.recompute_stage(mc, res, stage, noise.with_seed(derive_seed(seed, t, "b")))
        d = mantissa_diffs(res.stage_output(stage).reshape(-1), rows.reshape(-1))
        diffs.append(d[np.abs(d) < 1.0])
    return float(3.0 * np.std(np.concatenate(diffs)))


def honest_pair_accept_rate(mc: pipeline.ModelConfig, noise: pipeline.NoiseModel, trials: int,
                            seed: int = 0, attack: pipeline.Attack = pipeline.IDENTITY) -> Rate:
    """OFF_CHAIN acceptance of (candidate run, independent honest re-run) trace pairs."""
    hits = 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t, 7])
        prompt = [int(x) for x in rng.integers(1, mc.vocab_size, size=8)]
        res = pipeline.generate(mc, prompt, 8, noise.with_seed(derive_seed(seed, t, "a")), attack)
        stage = 1 + t % mc.n_segments
        rows = pipeline.recompute_stage(mc, res, stage, noise.with_seed(derive_seed(seed, t, "b")))
        hits += accept(compare_arrays(res.stage_output(stage), rows, OFF_CHAIN), OFF_CHAIN)
    return Rate(hits, trials)
