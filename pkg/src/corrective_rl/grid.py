"""GridWorld layouts, their text format, and conversion to an MdpSpec.

File format::

    name: square_wave
    step_reward: -1.0
    goal_reward: 100.0
    leap_reward: -2.0
    horizon_cap: 200
    teacher_path: DDDDRRRR...
    ---
    +-+-+
    |S  |
    + +~+
    |  G|
    +-+-+

The map has ``2*rows + 1`` lines of ``2*cols + 1`` characters. Odd/odd
positions hold cells (``.`` free, ``S`` start, ``G`` goal); odd/even and
even/odd positions hold edges (``|`` or ``-`` wall, space open, ``~``
leapable); even/even positions are ``+``. The outer border is always walls.
Header keys other than the five reward/cap/name keys are kept verbatim as
string metadata.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError
from .mdp import DOWN, LEFT, RIGHT, UP, MdpSpec

Cell = tuple[int, int]
Edge = tuple[int, int, int]  # (row, col, DOWN | RIGHT), canonical form

MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
PATH_LETTERS = {"U": UP, "D": DOWN, "L": LEFT, "R": RIGHT}
_KNOWN_KEYS = ("name", "step_reward", "goal_reward", "leap_reward", "horizon_cap")


def edge(cell: Cell, action: int) -> Edge:
    """Canonical key of the edge leaving ``cell`` in direction ``action``."""
    r, c = cell
    if action == DOWN:
        return (r, c, DOWN)
    if action == RIGHT:
        return (r, c, RIGHT)
    if action == UP:
        return (r - 1, c, DOWN)
    if action == LEFT:
        return (r, c - 1, RIGHT)
    raise ContractError(f"unknown action {action}")


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    start: Cell
    goal: Cell
    walls: frozenset = frozenset()
    leapable_walls: frozenset = frozenset()
    step_reward: float = -1.0
    goal_reward: float = 100.0
    leap_reward: float = -2.0
    horizon_cap: int = 200
    name: str = "grid"
    meta: tuple = field(default=(), compare=True)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractError("grid needs at least one cell")
        for cell in (self.start, self.goal):
            if not self.in_bounds(cell):
                raise ContractError(f"cell {cell} outside the grid")
        if self.start == self.goal:
            raise ContractError("start and goal must differ")
        object.__setattr__(self, "walls", frozenset(self.walls))
        object.__setattr__(self, "leapable_walls", frozenset(self.leapable_walls))
        if self.walls & self.leapable_walls:
            raise ContractError("an edge cannot be both a wall and leapable")
        for e in self.walls | self.leapable_walls:
            r, c, d = e
            if d not in (DOWN, RIGHT) or not self.in_bounds((r, c)):
                raise ContractError(f"edge {e} is not canonical")
            if not self.in_bounds((r + MOVES[d][0], c + MOVES[d][1])):
                raise ContractError(f"edge {e} lies on the border")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.rows and 0 <= cell[1] < self.cols

    def index(self, cell: Cell) -> int:
        return cell[0] * self.cols + cell[1]

    def cell(self, index: int) -> Cell:
        return divmod(int(index), self.cols)

    @property
    def state_count(self) -> int:
        return self.rows * self.cols

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self.meta)

    def move(self, cell: Cell, action: int) -> tuple[Cell, float]:
        """Successor cell and reward of ``action`` from a non-goal ``cell``."""
        dr, dc = MOVES[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        if not self.in_bounds(nxt):
            return cell, self.step_reward
        e = edge(cell, action)
        if e in self.walls:
            return cell, self.step_reward
        reward = self.leap_reward if e in self.leapable_walls else self.step_reward
        if nxt == self.goal:
            reward += self.goal_reward
        return nxt, reward

    def blocked_leaps(self, name: str | None = None) -> GridSpec:
        """The same grid with every leapable edge turned into a wall."""
        return replace(
            self,
            walls=self.walls | self.leapable_walls,
            leapable_walls=frozenset(),
            name=self.name + "_teacher" if name is None else name,
        )

    def to_mdp(self, discount: float = 1.0) -> MdpSpec:
        S, A = self.state_count, 4
        P = np.zeros((S, A, S))
        C = np.zeros((S, A, S))
        term = self.index(self.goal)
        for s in range(S):
            for a in range(A):
                if s == term:
                    P[s, a, s] = 1.0
                    continue
                nxt, reward = self.move(self.cell(s), a)
                P[s, a, self.index(nxt)] = 1.0
                C[s, a, self.index(nxt)] = -reward
        p0 = np.zeros(S)
        p0[self.index(self.start)] = 1.0
        return MdpSpec(P, C, p0, term, self.horizon_cap, discount)

    def follow(self, path: str | list[int]) -> list[Cell]:
        """Cells visited by an action sequence (letters ``UDLR`` or indices)."""
        actions = parse_path(path) if isinstance(path, str) else list(path)
        cells = [self.start]
        for a in actions:
            cells.append(self.move(cells[-1], a)[0])
        return cells


def parse_path(text: str) -> list[int]:
    try:
        return [PATH_LETTERS[ch] for ch in text.strip()]
    except KeyError as exc:
        raise ContractError(f"bad path letter {exc.args[0]!r}") from None


def format_path(actions) -> str:
    letters = {v: k for k, v in PATH_LETTERS.items()}
    return "".join(letters[int(a)] for a in actions)


def format_grid(grid: GridSpec) -> str:
    lines = [
        f"name: {grid.name}",
        f"step_reward: {grid.step_reward!r}",
        f"goal_reward: {grid.goal_reward!r}",
        f"leap_reward: {grid.leap_reward!r}",
        f"horizon_cap: {grid.horizon_cap}",
    ]
    lines += [f"{k}: {v}" for k, v in grid.meta]
    lines.append("---")
    R, C = grid.rows, grid.cols
    canvas = [["+"] * (2 * C + 1) for _ in range(2 * R + 1)]
    for i in range(2 * R + 1):
        for j in range(2 * C + 1):
            if i % 2 == 1 and j % 2 == 1:
                cell = (i // 2, j // 2)
                canvas[i][j] = "S" if cell == grid.start else "G" if cell == grid.goal else "."
            elif i % 2 == 1:  # vertical edge left of cell (i//2, j//2)
                canvas[i][j] = _edge_char(grid, (i // 2, j // 2 - 1, RIGHT), j in (0, 2 * C), "|")
            elif j % 2 == 1:  # horizontal edge above cell (i//2, j//2)
                canvas[i][j] = _edge_char(grid, (i // 2 - 1, j // 2, DOWN), i in (0, 2 * R), "-")
    lines += ["".join(row) for row in canvas]
    return "\n".join(lines) + "\n"


def _edge_char(grid: GridSpec, e: Edge, border: bool, wall: str) -> str:
    if border or e in grid.walls:
        return wall
    return "~" if e in grid.leapable_walls else " "


def parse_grid(text: str) -> GridSpec:
    """Inverse of :func:`format_grid`; raises ``ContractError`` with a line number."""
    raw = text.split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    try:
        sep = raw.index("---")
    except ValueError:
        raise ContractError("grid file has no '---' separator") from None
    header: dict[str, str] = {}
    meta = []
    for lineno, line in enumerate(raw[:sep], 1):
        key, colon, value = line.partition(": ")
        if not colon or not key:
            raise ContractError(f"line {lineno}: expected 'key: value'")
        if key in _KNOWN_KEYS:
            kind = int if key == "horizon_cap" else float if key.endswith("_reward") else str
            try:
                kind(value)
            except ValueError:
                raise ContractError(f"line {lineno}: bad {key} value {value!r}") from None
            header[key] = value
        else:
            meta.append((key, value))
    rows_txt = raw[sep + 1 :]
    first = sep + 2
    if len(rows_txt) < 3 or len(rows_txt) % 2 == 0:
        raise ContractError(f"line {first}: map must have an odd number (>= 3) of lines")
    width = len(rows_txt[0])
    if width < 3 or width % 2 == 0:
        raise ContractError(f"line {first}: map width must be odd and >= 3")
    R, C = len(rows_txt) // 2, width // 2
    walls, leaps = set(), set()
    start = goal = None
    for i, line in enumerate(rows_txt):
        lineno = first + i
        if len(line) != width:
            raise ContractError(f"line {lineno}: expected {width} characters, got {len(line)}")
        for j, ch in enumerate(line):
            if i % 2 == 0 and j % 2 == 0:
                ok = ch == "+"
            elif i % 2 == 1 and j % 2 == 1:
                cell = (i // 2, j // 2)
                ok = ch in ".SG"
                if ch == "S":
                    if start is not None:
                        raise ContractError(f"line {lineno}: second start cell")
                    start = cell
                elif ch == "G":
                    if goal is not None:
                        raise ContractError(f"line {lineno}: second goal cell")
                    goal = cell
            else:
                vertical = i % 2 == 1
                wall = "|" if vertical else "-"
                border = j in (0, 2 * C) if vertical else i in (0, 2 * R)
                e = (i // 2, j // 2 - 1, RIGHT) if vertical else (i // 2 - 1, j // 2, DOWN)
                if border:
                    ok = ch == wall
                elif ch == wall:
                    ok = True
                    walls.add(e)
                elif ch == "~":
                    ok = True
                    leaps.add(e)
                else:
                    ok = ch == " "
            if not ok:
                raise ContractError(f"line {lineno}, column {j + 1}: unexpected character {ch!r}")
    if start is None or goal is None:
        raise ContractError("map needs exactly one 'S' and one 'G'")
    try:
        return GridSpec(
            rows=R,
            cols=C,
            start=start,
            goal=goal,
            walls=frozenset(walls),
            leapable_walls=frozenset(leaps),
            step_reward=float(header.get("step_reward", -1.0)),
            goal_reward=float(header.get("goal_reward", 100.0)),
            leap_reward=float(header.get("leap_reward", -2.0)),
            horizon_cap=int(header.get("horizon_cap", 200)),
            name=header.get("name", "grid"),
            meta=tuple(meta),
        )
    except ValueError as exc:
        if isinstance(exc, ContractError):
            raise
        raise ContractError(f"bad header value: {exc}") from None


def load_grid(path) -> GridSpec:
    return parse_grid(Path(path).read_text())


def save_grid(grid: GridSpec, path) -> None:
    Path(path).write_text(format_grid(grid))


def data_path(name: str) -> Path:
    """Location of a bundled grid or teacher file."""
    return Path(__file__).parent / "data" / name
