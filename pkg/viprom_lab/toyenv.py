"""Deterministic 2D pixel-observation manipulation tasks with scripted experts.

The workspace is the unit square. Actions are 2-D effector velocity commands
clipped to ``[-1, 1]``; one step moves the effector by ``action × STEP_SIZE``.
Objects in contact with the effector (closer than ``CONTACT_RADIUS`` before the
move) follow its displacement, sliders along their rail only.

Tasks:
    * ``reach``: bring the effector to the goal marker.
    * ``push``: bring the block to the goal marker.
    * ``open-slider`` / ``close-slider``: slide the handle to the open/closed
      end of its rail.

Note (RU): Игрушечная среда манипуляции с пиксельными наблюдениями.
"""

import dataclasses
import io
import json
import logging
import zipfile
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from viprom_lab.base import VipromModel, canonical_json
from viprom_lab.dataset.render import Canvas
from viprom_lab.dataset.store import FrameImage
from viprom_lab.enums import TaskId
from viprom_lab.exceptions import (
    ActionDimensionError,
    ExpertFailureError,
    InvalidInputError,
    ToyEnvError,
)
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike
from viprom_lab.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

ACTION_DIM = 2
STEP_SIZE = 0.05
CONTACT_RADIUS = 0.09
RAIL = (0.15, 0.85)
OBJECT_BOUNDS = (0.05, 0.95)

DEFAULT_HORIZONS = {
    TaskId.REACH: 50,
    TaskId.PUSH: 80,
    TaskId.OPEN_SLIDER: 60,
    TaskId.CLOSE_SLIDER: 60,
}

BACKGROUND = (0.5, 0.5, 0.5)
EFFECTOR_COLOR = (0.9, 0.15, 0.15)
GOAL_COLOR = (0.15, 0.8, 0.25)
BLOCK_COLOR = (0.15, 0.3, 0.9)
RAIL_COLOR = (0.25, 0.25, 0.25)
HANDLE_COLOR = (0.95, 0.65, 0.1)

Point = Tuple[float, float]


@model
class TaskSpec(VipromModel):
    """A toy task.

    Attributes:
        task_id: Task family.
        horizon: Maximum number of steps per episode.
        tolerance: Success distance (effector, block or handle to goal).
        image_hw: Rendered observation size.
        proprio: Expose the effector position alongside pixels.

    Note (RU): Описание задачи.
    """

    task_id: TaskId = TaskId.REACH
    horizon: int = 0
    tolerance: float = 0.05
    image_hw: Tuple[int, int] = (32, 32)
    proprio: bool = False

    def __post_init__(self) -> None:
        self.task_id = TaskId(self.task_id)
        if not self.horizon:
            self.horizon = DEFAULT_HORIZONS[self.task_id]
        if self.horizon < 1:
            raise InvalidInputError(f"horizon must be >= 1, got {self.horizon}")
        self.image_hw = (int(self.image_hw[0]), int(self.image_hw[1]))
        self._id_attrs = (self.task_id, self.horizon, self.tolerance, self.image_hw, self.proprio)

    @property
    def action_dim(self) -> int:
        return ACTION_DIM

    def is_success(self, state: "EnvState") -> bool:
        """Success predicate, decided from the internal state."""
        if self.task_id == TaskId.REACH:
            return _dist(state.effector, state.goal) <= self.tolerance
        if self.task_id == TaskId.PUSH:
            return _dist(state.obj, state.goal) <= self.tolerance
        return abs(state.obj[0] - state.goal[0]) <= self.tolerance


def make_task(task_id: Any, **overrides: Any) -> TaskSpec:
    return TaskSpec(task_id=TaskId(task_id), **overrides)


@model
class EnvState(VipromModel):
    """Full environment state.

    Attributes:
        task: Task being played.
        effector: Effector position.
        obj: Block (push), slider handle (sliders) or the goal again (reach).
        goal: Goal position.
        step_count: Steps taken so far.
        seed: Seed of the episode layout.

    Note (RU): Состояние среды.
    """

    task: TaskSpec = field(default_factory=TaskSpec)
    effector: Point = (0.5, 0.5)
    obj: Point = (0.5, 0.5)
    goal: Point = (0.5, 0.5)
    step_count: int = 0
    seed: int = 0

    def vector(self) -> np.ndarray:
        """``[effector, obj, goal]`` as a float32 6-vector (oracle features)."""
        return np.asarray([*self.effector, *self.obj, *self.goal], dtype=np.float32)

    def proprio(self) -> np.ndarray:
        return np.asarray(self.effector, dtype=np.float32)

    def in_contact(self) -> bool:
        return self.task.task_id != TaskId.REACH and _dist(self.effector, self.obj) < CONTACT_RADIUS


def _dist(a: Point, b: Point) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _clip_point(p: np.ndarray, low: float, high: float) -> Point:
    q = np.clip(p, low, high)
    return float(q[0]), float(q[1])


def reset(task: TaskSpec, seed: int) -> Tuple[EnvState, FrameImage]:
    """Seed-deterministic initial layout and its rendering.

    Note (RU): Сброс среды.
    """
    rng = np.random.default_rng(seed)
    effector = tuple(rng.uniform(0.1, 0.9, size=2))
    if task.task_id == TaskId.REACH:
        goal = tuple(rng.uniform(0.15, 0.85, size=2))
        while _dist(effector, goal) < 0.3:
            goal = tuple(rng.uniform(0.15, 0.85, size=2))
        obj = goal
    elif task.task_id == TaskId.PUSH:
        obj = tuple(rng.uniform(0.25, 0.75, size=2))
        goal = tuple(rng.uniform(0.2, 0.8, size=2))
        while _dist(obj, goal) < 0.25:
            goal = tuple(rng.uniform(0.2, 0.8, size=2))
        while _dist(effector, obj) < CONTACT_RADIUS + 0.05:
            effector = tuple(rng.uniform(0.1, 0.9, size=2))
    else:
        rail_y = float(rng.uniform(0.3, 0.7))
        if task.task_id == TaskId.OPEN_SLIDER:
            handle_x, goal_x = rng.uniform(0.2, 0.35), rng.uniform(0.65, 0.8)
        else:
            handle_x, goal_x = rng.uniform(0.65, 0.8), rng.uniform(0.2, 0.35)
        obj = (float(handle_x), rail_y)
        goal = (float(goal_x), rail_y)
        while _dist(effector, obj) < CONTACT_RADIUS + 0.05:
            effector = tuple(rng.uniform(0.1, 0.9, size=2))

    state = EnvState(
        task=task,
        effector=_as_point(effector),
        obj=_as_point(obj),
        goal=_as_point(goal),
        step_count=0,
        seed=int(seed),
    )
    return state, render(state)


def _as_point(p: Sequence[float]) -> Point:
    return float(p[0]), float(p[1])


def step(state: EnvState, action: Any) -> Tuple[EnvState, FrameImage, bool, bool]:
    """Apply one action.

    Returns:
        ``(next_state, observation, success, done)``; ``done`` when the task
        is solved or the horizon is reached.

    Raises:
        ActionDimensionError: When the action is not a finite 2-vector.
        ToyEnvError: When the episode is already over.

    Note (RU): Шаг среды.
    """
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (ACTION_DIM,):
        raise ActionDimensionError(f"Action must have {ACTION_DIM} components, got {a.shape[0]}")
    if not np.isfinite(a).all():
        raise ActionDimensionError("Action must be finite")
    if state.step_count >= state.task.horizon:
        raise ToyEnvError("Episode horizon already reached; call reset()")

    delta = np.clip(a, -1.0, 1.0) * STEP_SIZE
    contact = state.in_contact()
    effector = _clip_point(np.asarray(state.effector) + delta, 0.0, 1.0)
    moved = np.asarray(effector) - np.asarray(state.effector)
    obj = state.obj
    if contact and state.task.task_id == TaskId.PUSH:
        obj = _clip_point(np.asarray(state.obj) + moved, *OBJECT_BOUNDS)
    elif contact:
        obj = (float(np.clip(state.obj[0] + moved[0], *RAIL)), state.obj[1])

    next_state = dataclasses.replace(
        state, effector=effector, obj=obj, step_count=state.step_count + 1
    )
    success = state.task.is_success(next_state)
    done = success or next_state.step_count >= state.task.horizon
    return next_state, render(next_state), success, done


def render(state: EnvState) -> FrameImage:
    """Rasterize the state.

    Note (RU): Отрисовка состояния.
    """
    height, width = state.task.image_hw
    canvas = Canvas(height, width, BACKGROUND)
    task_id = state.task.task_id
    if task_id in (TaskId.OPEN_SLIDER, TaskId.CLOSE_SLIDER):
        center = ((RAIL[0] + RAIL[1]) / 2, state.obj[1])
        canvas.draw_box(center, (RAIL[1] - RAIL[0]) / 2, 0.015, RAIL_COLOR)
        canvas.draw("ring", state.goal, 0.07, GOAL_COLOR)
        canvas.draw_box(state.obj, 0.035, 0.06, HANDLE_COLOR)
    elif task_id == TaskId.PUSH:
        canvas.draw("ring", state.goal, 0.08, GOAL_COLOR)
        canvas.draw("square", state.obj, 0.07, BLOCK_COLOR)
    else:
        canvas.draw("ring", state.goal, 0.07, GOAL_COLOR)
    canvas.draw("circle", state.effector, 0.045, EFFECTOR_COLOR)
    source = (f"{task_id.value}-{state.seed}", state.step_count)
    return FrameImage.from_uint8(canvas.to_uint8(), source)


def scripted_expert(state: EnvState, task: Optional[TaskSpec] = None) -> np.ndarray:
    """Greedy geometric controller.

    Moves straight to the goal (reach) or to the object and then carries it to
    the goal. The returned action has norm at most 1.

    Note (RU): Скриптовый эксперт.
    """
    task = task or state.task
    effector = np.asarray(state.effector)
    if task.task_id == TaskId.REACH:
        delta = np.asarray(state.goal) - effector
    elif not state.in_contact():
        to_obj = np.asarray(state.obj) - effector
        distance = float(np.linalg.norm(to_obj))
        # stop halfway inside the contact radius
        travel = max(distance - CONTACT_RADIUS / 2, 0.0)
        delta = to_obj / max(distance, 1e-12) * travel
    elif task.task_id == TaskId.PUSH:
        delta = np.asarray(state.goal) - np.asarray(state.obj)
    else:
        delta = np.asarray([state.goal[0] - state.obj[0], 0.0])

    action = delta / STEP_SIZE
    norm = float(np.linalg.norm(action))
    if norm > 1.0:
        action = action / norm
    return action.astype(np.float32)


@model
class Demonstration(VipromModel):
    """One successful expert rollout.

    Attributes:
        task_id: Task of the rollout.
        seed: Episode seed.
        observations: Observation before each action.
        actions: ``T×2`` actions.
        states: ``T×6`` state vectors before each action.
        success: Whether the rollout solved the task.

    Note (RU): Демонстрация эксперта.
    """

    task_id: TaskId = TaskId.REACH
    seed: int = 0
    observations: List[FrameImage] = field(default_factory=list)
    actions: np.ndarray = field(default_factory=lambda: np.zeros((0, ACTION_DIM), np.float32))
    states: np.ndarray = field(default_factory=lambda: np.zeros((0, 6), np.float32))
    success: bool = False

    def __post_init__(self) -> None:
        self.task_id = TaskId(self.task_id)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def steps(self) -> List[Tuple[FrameImage, np.ndarray]]:
        return list(zip(self.observations, self.actions))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id.value,
            "seed": self.seed,
            "length": len(self),
            "success": self.success,
        }


def rollout_expert(task: TaskSpec, seed: int) -> Demonstration:
    state, observation = reset(task, seed)
    observations, actions, states = [], [], []
    success = False
    done = False
    while not done:
        action = scripted_expert(state, task)
        observations.append(observation)
        actions.append(action)
        states.append(state.vector())
        state, observation, success, done = step(state, action)
    return Demonstration(
        task_id=task.task_id,
        seed=seed,
        observations=observations,
        actions=np.stack(actions).astype(np.float32),
        states=np.stack(states).astype(np.float32),
        success=success,
    )


def collect_demos(task: TaskSpec, n: int, seed: int) -> List[Demonstration]:
    """``n`` successful expert rollouts, deterministic in ``seed``.

    Raises:
        InvalidInputError: When ``n < 1``.
        ExpertFailureError: When the expert fails (an environment regression).

    Note (RU): Сбор демонстраций.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    demos = []
    for i in range(n):
        episode_seed = derive_seed(seed, "demo", task.task_id.value, i)
        demo = rollout_expert(task, episode_seed)
        if not demo.success:
            raise ExpertFailureError(
                f"Expert failed {task.task_id.value} with episode seed {episode_seed}"
            )
        demos.append(demo)
    logger.debug(f"Collected {n} {task.task_id.value} demos, lengths {[len(d) for d in demos]}")
    return demos


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_demos(
    demos: Sequence[Demonstration], path: PathLike, task: Optional[TaskSpec] = None
) -> Path:
    """Write demos as a compressed ``.npz`` archive with byte-stable entries.

    Note (RU): Сохранение демонстраций.
    """
    target = Path(path)
    meta = {
        "task": task.to_dict() if task is not None else None,
        "demos": [d.to_dict() for d in demos],
    }
    meta_bytes = canonical_json(meta).encode("utf-8")
    arrays: Dict[str, np.ndarray] = {"meta": np.frombuffer(meta_bytes, np.uint8)}
    for i, demo in enumerate(demos):
        arrays[f"obs_{i:04d}"] = np.stack([o.to_uint8() for o in demo.observations])
        arrays[f"act_{i:04d}"] = np.asarray(demo.actions, dtype=np.float32)
        arrays[f"state_{i:04d}"] = np.asarray(demo.states, dtype=np.float32)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(target, "w", compression=zipfile.ZIP_DEFLATED) as archive:
            for name in sorted(arrays):
                buffer = io.BytesIO()
                np.lib.format.write_array(buffer, arrays[name], allow_pickle=False)
                info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE)
                info.compress_type = zipfile.ZIP_DEFLATED
                archive.writestr(info, buffer.getvalue())
    except OSError as e:
        raise ToyEnvError(f"Cannot write demos to {target}: {e}") from e
    return target


def load_demos(path: PathLike) -> Tuple[List[Demonstration], Optional[TaskSpec]]:
    """Read an archive written by :func:`save_demos`.

    Note (RU): Загрузка демонстраций.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            demos = []
            for i, item in enumerate(meta["demos"]):
                observations = [
                    FrameImage.from_uint8(frame, (f"{item['task_id']}-{item['seed']}", t))
                    for t, frame in enumerate(data[f"obs_{i:04d}"])
                ]
                demos.append(
                    Demonstration(
                        task_id=item["task_id"],
                        seed=item["seed"],
                        observations=observations,
                        actions=data[f"act_{i:04d}"],
                        states=data[f"state_{i:04d}"],
                        success=item["success"],
                    )
                )
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise ToyEnvError(f"Cannot read demos from {path}: {e}") from e
    task = TaskSpec.de_json(meta["task"]) if meta.get("task") else None
    return demos, task
