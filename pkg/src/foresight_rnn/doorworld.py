"""Deterministic toy door world.

Three latched door types that are indistinguishable from observation until
the door actually moves: push opens along +x, pull along -x, slide along +y
(hand-frame axes).  The knob must be twisted (kappa >= 0.8) before the door
opens; the door panel then follows grasped hand motion along the correct
axis only.  All quantities live in normalized units on the [-1, 1] plane.

Kinematics per step (caps are per-step limits):
  hand        moves toward the commanded (x, y), Euclidean cap 0.1
  wrist/grip  track their commands, cap 0.2
  knob twist  tracks |wrist| while the knob is grasped, cap 0.2
  door        d += max(0, hand displacement . axis) * 2.0 once unlatched,
              frozen while externally held, never decreasing
The knob sits at (0.5 + offset, 0) when closed and rides the door panel as
it opens, so a grasp is maintained while opening.

Commands are positional, and consecutive observations differ by less than
the per-step caps, so replaying a demonstration's joint observations
(shifted by one step) as commands re-opens the door: a model that predicts
the next joint observation well is automatically a working controller.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .foresight import (
    EpisodeStats,
    ForesightConfig,
    draw_candidate_noise,
    refine_batch,
    sigma_from_norm,
    noise_intensity,
)
from .network import (
    FusedRollout,
    HiddenState,
    NetworkConfig,
    decode_heads,
    forward_step,
)
from .rng import RngStream

DOOR_TYPES = ("push", "pull", "slide")
AXES = {"push": np.array([1.0, 0.0]),
        "pull": np.array([-1.0, 0.0]),
        "slide": np.array([0.0, 1.0])}

HAND_CAP = 0.1
TRACK_CAP = 0.2
GRASP_RADIUS = 0.1
UNLATCH_THRESHOLD = 0.8
OPEN_GAIN = 2.0
# After unlatching, the demonstrator tests opening directions in this fixed
# order (independent of the true door type, so the order itself leaks
# nothing) with small grasp-preserving steps, watching the panel for a
# response.  PROBE_STEP stays well inside GRASP_RADIUS so a wrong-direction
# test never breaks the grasp.
PROBE_ORDER = ("pull", "slide", "push")
PROBE_STEP = 0.06
KNOB_BASE = np.array([0.5, 0.0])
HOME = np.array([-0.5, 0.0])
SUCCESS_THRESHOLD = 0.6
DEMO_OPEN_TARGET = 0.8
DEMO_STEPS = 150
MAX_OFFSET = 0.05

# raw observation bounds, the normalization manifest for generated datasets
JOINT_BOUNDS = np.array([[-1, 1], [-1, 1], [-1, 1], [0, 1]], dtype=np.float64)
FEAT_BOUNDS = np.array([[-1, 1], [-1, 1], [-1, 1], [0, 1],
                        [-1, 1], [-1, 1], [0, 1], [0, 1]], dtype=np.float64)
OBS_BOUNDS = {"joint": JOINT_BOUNDS, "feat": FEAT_BOUNDS}


@dataclass
class EnvState:
    hand: np.ndarray          # (2,) in [-1, 1]^2
    wrist: float              # [-1, 1]
    grip: float               # [0, 1]
    knob_twist: float         # [0, 1]
    door_open: float          # [0, 1]
    door_type: str
    offset: float             # [-0.05, 0.05]
    held: bool = False

    def copy(self) -> "EnvState":
        return dataclasses.replace(self, hand=self.hand.copy())


@dataclass(frozen=True)
class InterferenceSchedule:
    hold_from: int
    hold_until: int           # inclusive

    def __post_init__(self):
        if not (0 <= self.hold_from <= self.hold_until):
            raise ValueError(f"bad interference window [{self.hold_from}, {self.hold_until}]")

    def active(self, t: int) -> bool:
        return self.hold_from <= t <= self.hold_until


def make_initial_state(door_type: str, offset: float = 0.0,
                       hand=None) -> EnvState:
    if door_type not in DOOR_TYPES:
        raise ValueError(f"unknown door type '{door_type}'")
    if abs(offset) > MAX_OFFSET + 1e-12:
        raise ValueError(f"offset {offset} outside [-{MAX_OFFSET}, {MAX_OFFSET}]")
    return EnvState(hand=np.array(HOME if hand is None else hand, dtype=np.float64),
                    wrist=0.0, grip=0.0, knob_twist=0.0, door_open=0.0,
                    door_type=door_type, offset=float(offset))


def knob_position(state: EnvState) -> np.ndarray:
    """Closed-door knob plus the panel displacement (panel moves d / gain)."""
    return (KNOB_BASE + np.array([state.offset, 0.0])
            + (state.door_open / OPEN_GAIN) * AXES[state.door_type])


def _track(current: float, target: float, cap: float) -> float:
    return current + float(np.clip(target - current, -cap, cap))


def env_step(state: EnvState, command) -> EnvState:
    """Advance one step.  Pure: returns a new state, inputs clamped."""
    cmd = np.clip(np.asarray(command, dtype=np.float64), -1.0, 1.0)
    if cmd.shape != (4,):
        raise ValueError(f"command must be a 4-vector, got shape {cmd.shape}")
    new = state.copy()

    delta = cmd[:2] - state.hand
    dist = float(np.linalg.norm(delta))
    if dist > HAND_CAP:
        delta = delta * (HAND_CAP / dist)
    new.hand = np.clip(state.hand + delta, -1.0, 1.0)
    new.wrist = _track(state.wrist, float(cmd[2]), TRACK_CAP)
    new.grip = float(np.clip(_track(state.grip, float(cmd[3]), TRACK_CAP), 0.0, 1.0))

    knob = knob_position(state)
    grasping = (float(np.linalg.norm(new.hand - knob)) <= GRASP_RADIUS
                and new.grip > 0.5)
    if grasping:
        new.knob_twist = float(np.clip(
            _track(state.knob_twist, abs(new.wrist), TRACK_CAP), 0.0, 1.0))
    if grasping and new.knob_twist >= UNLATCH_THRESHOLD and not state.held:
        gain = max(0.0, float((new.hand - state.hand) @ AXES[state.door_type]))
        new.door_open = min(1.0, state.door_open + OPEN_GAIN * gain)
    return new


def observe(state: EnvState) -> dict:
    """Raw observation bundle {joint: (4,), feat: (8,)}.

    feat carries the panel displacement and opening fraction, all zero while
    the door is closed -- the three door types are indistinguishable until
    the door moves.
    """
    axis = AXES[state.door_type]
    knob = knob_position(state)
    prox = 1.0 if float(np.linalg.norm(state.hand - knob)) <= GRASP_RADIUS else 0.0
    joint = np.array([state.hand[0], state.hand[1], state.wrist, state.grip])
    feat = np.array([state.hand[0], state.hand[1], state.wrist, state.knob_twist,
                     state.door_open * axis[0], state.door_open * axis[1],
                     state.door_open, prox])
    return {"joint": joint, "feat": feat}


# ---------------------------------------------------------------------------
# scripted demonstrator / oracle policy
# ---------------------------------------------------------------------------

class ScriptedController:
    """Phase controller for the demonstrator and the evaluation oracle.

    Phases re-derive from the environment state each call: approach the
    knob, close the grip, twist until unlatched, then find the opening
    direction by probing.  The three door types look identical until the
    panel moves, so the controller tests the axes in the fixed PROBE_ORDER
    with small grasp-preserving steps and watches the panel: a
    wrong-direction test leaves it still, the right one drags it.  Once
    the panel has moved it follows that axis to the open target and holds.
    The probe cursor is the only memory across calls (it wraps, so the
    controller keeps cycling directions if the door is clamped shut);
    everything else reads off the state, so the controller recovers from
    perturbations.  Waypoints carry Gaussian jitter (std 0.01) drawn once
    at construction.  When a jitter stream is supplied the approach pace
    is additionally re-drawn every step, so a demonstration's progress
    cannot be read off a clock -- the position itself is the only reliable
    predictor of the next waypoint.
    """

    def __init__(self, door_type: str, offset: float,
                 jitter_rng: RngStream | None = None,
                 open_target: float = DEMO_OPEN_TARGET):
        self.door_type = door_type
        self.axis = AXES[door_type]
        self.open_target = open_target
        self.rng = jitter_rng
        jit = (lambda n: jitter_rng.normal(n) * 0.01) if jitter_rng else (lambda n: np.zeros(n))
        self.approach_jitter = jit(2)
        self.open_step = float(np.clip(0.05 + jit(1)[0], 0.02, HAND_CAP))
        # one jittered test amplitude per direction; clipped so a test stays
        # inside both the grasp radius and the controller's contact band
        self.probe_steps = np.clip(PROBE_STEP + jit(len(PROBE_ORDER)), 0.04, 0.08)
        self.probe_cursor = 0

    def reset(self):
        self.probe_cursor = 0

    def command(self, state: EnvState) -> np.ndarray:
        hand = state.hand
        knob = knob_position(state)
        dist = float(np.linalg.norm(hand - knob))
        near = dist <= 0.08
        if state.door_open >= self.open_target:
            return np.array([hand[0], hand[1], state.wrist, 1.0])
        if near and state.grip > 0.5 and state.knob_twist >= UNLATCH_THRESHOLD:
            if state.door_open > 0.0:
                # the panel has responded; its axis is confirmed, follow it
                target = hand + self.open_step * self.axis
                return np.array([target[0], target[1], state.wrist, 1.0])
            if dist > 0.02:
                # a test just failed (or the grasp is off-centre):
                # re-centre on the knob before the next test
                return np.array([knob[0], knob[1], state.wrist, 1.0])
            k = self.probe_cursor % len(PROBE_ORDER)
            self.probe_cursor += 1
            target = knob + self.probe_steps[k] * AXES[PROBE_ORDER[k]]
            return np.array([target[0], target[1], state.wrist, 1.0])
        if near and state.grip > 0.5:
            return np.array([hand[0], hand[1], 1.0, 1.0])
        if near:
            return np.array([hand[0], hand[1], 0.0, 1.0])
        # approach the knob where it currently is (it rides the panel)
        pace = float(self.rng.uniform(0.5, 1.0)) if self.rng else 1.0
        step = knob + self.approach_jitter - hand
        dist = float(np.linalg.norm(step))
        cap = pace * HAND_CAP
        if dist > cap:
            step = step * (cap / dist)
        target = hand + step
        return np.array([target[0], target[1], 0.0, 0.0])

    # oracle-policy interface for run_episode
    def act(self, obs: dict, state: EnvState):
        return self.command(state), {}


@dataclass
class Demonstration:
    id: str
    door_type: str
    offset: float
    observations: dict    # modality -> (150, dim) raw values
    commands: np.ndarray  # (149, 4)


def generate_demonstration(door_type: str, offset: float,
                           jitter_seed: int, traj_id: str | None = None) -> Demonstration:
    """Run the scripted controller for exactly 150 steps.

    Each demonstration varies the start pose and the per-step approach pace
    (drawn from the jitter seed), so the set covers the start-pose spread
    used at evaluation time and the episode phase is not locked to the
    clock.  After unlatching, the recorded behaviour probes the opening
    directions in a fixed order until the panel responds, so every action
    in a demonstration is determined by the observable history alone --
    never by door-type knowledge the observations don't carry.  Raises if
    the door fails to reach the demo open target -- that means the
    controller tuning is broken, not that data varies.
    """
    rng = RngStream(jitter_seed, ("demo-jitter",))
    start = np.array(HOME) + rng.child("start").uniform(-0.07, 0.07, 2)
    controller = ScriptedController(door_type, offset, jitter_rng=rng)
    state = make_initial_state(door_type, offset, hand=start)
    joints = np.empty((DEMO_STEPS, 4))
    feats = np.empty((DEMO_STEPS, 8))
    commands = np.empty((DEMO_STEPS - 1, 4))
    obs = observe(state)
    joints[0], feats[0] = obs["joint"], obs["feat"]
    for t in range(DEMO_STEPS - 1):
        commands[t] = controller.command(state)
        state = env_step(state, commands[t])
        obs = observe(state)
        joints[t + 1], feats[t + 1] = obs["joint"], obs["feat"]
    if state.door_open < DEMO_OPEN_TARGET:
        raise RuntimeError(
            f"scripted controller only opened {door_type} door to "
            f"d={state.door_open:.3f} (offset {offset}, seed {jitter_seed})")
    return Demonstration(
        id=traj_id or f"{door_type}_{jitter_seed}",
        door_type=door_type, offset=offset,
        observations={"joint": joints, "feat": feats}, commands=commands)


def demo_offsets(n: int = 5) -> list:
    """Evenly spaced door offsets across the declared range."""
    return [float(x) for x in np.linspace(-MAX_OFFSET, MAX_OFFSET, n)]


def generate_dataset_records(demos_per_type: int = 5, types=DOOR_TYPES,
                             seed: int = 0):
    """The demonstration recipe: per door type, one demo at each offset.

    Defaults produce the 15-sequence training set (3 types x 5 offsets).
    """
    records = []
    for door_type in types:
        for k, offset in enumerate(demo_offsets(demos_per_type)):
            demo = generate_demonstration(door_type, offset,
                                          jitter_seed=seed + k,
                                          traj_id=f"{door_type}_{k:02d}")
            records.append((demo.id, demo.door_type, demo.observations))
    return records


# ---------------------------------------------------------------------------
# model-in-the-loop evaluation
# ---------------------------------------------------------------------------

class ModelPolicy:
    """Drives the environment with a trained predictor.

    Each step: normalize the observation, run the variant's state hook
    (foresight refinement / additive noise / nothing), take one forward
    step, and emit the denormalized predicted joint means as the command.
    """

    def __init__(self, params: dict, net: NetworkConfig, variant: str,
                 normalizer, rng: RngStream,
                 foresight: ForesightConfig | None = None):
        if variant not in ("ufrnn", "sh", "sh_noise"):
            raise ValueError(f"unknown variant '{variant}'")
        self.params = params
        self.net = net
        self.variant = variant
        self.normalizer = normalizer
        self.rng = rng
        self.foresight = foresight or ForesightConfig(t_max=net.t_max)
        self.fused = FusedRollout(params, net) if variant == "ufrnn" else None
        self.reset()

    def reset(self):
        self.state = HiddenState.zeros(self.net, 1)
        self.stats = EpisodeStats.fresh(1)
        self.last_output = None
        self.t = 0

    def act(self, obs: dict, env_state=None):
        inputs = {m.name: self.normalizer.normalize(m.name, obs[m.name])[None, :]
                  for m in self.net.modalities}
        info = {}
        if self.last_output is None:
            # seed the episode stats from the variance the state decodes now
            self.last_output = decode_heads(self.params, self.net, self.state)
        if self.variant in ("ufrnn", "sh_noise"):
            norm = noise_intensity(self.last_output.var, self.stats)
            sigma = sigma_from_norm(norm, self.foresight)
            if self.foresight.trigger_threshold is not None:
                sigma = np.where(norm >= self.foresight.trigger_threshold, sigma, 0.0)
            stream = self.rng.child("noise", self.t)
            if self.variant == "ufrnn":
                noise = draw_candidate_noise(stream, self.foresight,
                                             self.net.shared_hidden)[None]
                self.state, diag, _ = refine_batch(
                    self.params, self.net, self.foresight, self.state,
                    sigma, noise, fused=self.fused)
                info["foresight"] = diag.record(0)
            else:
                z = stream.normal(self.net.shared_hidden)
                self.state.shared_h = self.state.shared_h + sigma[:, None] * z
        out, self.state = forward_step(self.params, self.net, inputs, self.state)
        self.last_output = out
        info["shared_h"] = self.state.shared_h[0].copy()
        info["mean_var"] = {m.name: float(out.var[m.name].mean())
                            for m in self.net.modalities}
        self.t += 1
        command = self.normalizer.denormalize("joint", out.mean["joint"][0])
        return command, info


@dataclass
class EpisodeLog:
    door_type: str
    offset: float
    success: bool
    steps_to_open: int | None
    observations: dict        # modality -> (steps+1, dim) raw
    commands: np.ndarray      # (steps, 4)
    door_open: np.ndarray     # (steps+1,)
    shared_h: np.ndarray | None
    mean_var: dict | None     # modality -> (steps,) mean predicted variance
    foresight: list           # per-step diagnostic dicts (may be empty)

    def summary(self) -> dict:
        return {"success": bool(self.success),
                "steps_to_open": self.steps_to_open,
                "door_type": self.door_type,
                "offset": float(self.offset)}


def run_episode(policy, initial_state: EnvState, max_steps: int = 200,
                interference: InterferenceSchedule | None = None) -> EpisodeLog:
    """Roll a policy in the environment.

    success = door opened to the threshold within max_steps; the episode
    always runs the full max_steps so post-success (and post-interference)
    behavior is recorded.
    """
    policy.reset()
    state = initial_state.copy()
    obs_log = {"joint": [], "feat": []}
    commands, d_trace, h_trace, fs_log, var_trace = [], [], [], [], []
    steps_to_open = None

    obs = observe(state)
    for m in obs_log:
        obs_log[m].append(obs[m])
    d_trace.append(state.door_open)
    for t in range(max_steps):
        state.held = interference.active(t) if interference else False
        command, info = policy.act(obs, state)
        state = env_step(state, command)
        obs = observe(state)
        commands.append(np.asarray(command, dtype=np.float64))
        for m in obs_log:
            obs_log[m].append(obs[m])
        d_trace.append(state.door_open)
        if "shared_h" in info:
            h_trace.append(info["shared_h"])
        if "foresight" in info:
            fs_log.append(info["foresight"])
        if "mean_var" in info:
            var_trace.append(info["mean_var"])
        if steps_to_open is None and state.door_open >= SUCCESS_THRESHOLD:
            steps_to_open = t + 1
    mean_var = None
    if var_trace:
        mean_var = {name: np.array([v[name] for v in var_trace])
                    for name in var_trace[0]}
    return EpisodeLog(
        door_type=state.door_type, offset=state.offset,
        success=steps_to_open is not None, steps_to_open=steps_to_open,
        observations={m: np.array(v) for m, v in obs_log.items()},
        commands=np.array(commands), door_open=np.array(d_trace),
        shared_h=np.array(h_trace) if h_trace else None,
        mean_var=mean_var, foresight=fs_log)


class ReplayPolicy:
    """Feeds back a fixed command sequence (demonstration replay)."""

    def __init__(self, commands: np.ndarray):
        self.commands = commands
        self.t = 0

    def reset(self):
        self.t = 0

    def act(self, obs, state=None):
        cmd = self.commands[min(self.t, len(self.commands) - 1)]
        self.t += 1
        return cmd, {}


class OraclePolicy:
    """Scripted controller bound lazily to each episode's door and offset.

    A perfect stand-in for a trained model: it reads the true environment
    state, so it calibrates what the evaluation harness reports when the
    policy is not the bottleneck.
    """

    def __init__(self):
        self.inner = None

    def reset(self):
        self.inner = None

    def act(self, obs: dict, state: EnvState):
        if self.inner is None:
            self.inner = ScriptedController(state.door_type, state.offset)
        return self.inner.command(state), {}


def trial_conditions(rng: RngStream, trials_per_type: int = 10):
    """Seeded (door_type, offset, start hand) tuples, identical across
    checkpoints so success tables compare like against like."""
    conditions = []
    for door_type in DOOR_TYPES:
        for k in range(trials_per_type):
            s = rng.child(door_type, k)
            offset = float(s.uniform(-MAX_OFFSET, MAX_OFFSET))
            hand = HOME + s.uniform(-0.05, 0.05, 2)
            conditions.append((door_type, offset, hand))
    return conditions


def success_counts(policy_factory, conditions, max_steps: int = 200,
                   interference=None):
    """Run one episode per condition; returns {door_type: successes} and the
    episode logs."""
    counts = {d: 0 for d in DOOR_TYPES}
    logs = []
    for door_type, offset, hand in conditions:
        policy = policy_factory()
        episode = run_episode(policy,
                              make_initial_state(door_type, offset, hand=hand),
                              max_steps=max_steps, interference=interference)
        counts[door_type] += int(episode.success)
        logs.append(episode)
    return counts, logs
