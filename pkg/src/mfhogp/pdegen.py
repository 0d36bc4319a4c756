"""Multi-fidelity training-data generation from finite-difference solvers.

Three parametric PDE families are supported, each solved on a hierarchy of
grid resolutions (fidelities) and bilinearly aligned to a fixed output grid
so every fidelity shares one flattened output dimension:

* ``burgers`` — viscous Burgers on x in [0,1], t in [0,3], initial condition
  sin(pi x / 2), homogeneous Dirichlet walls for t > 0. Backward Euler in
  time with upwind convection, Picard iteration for the nonlinearity. A mesh
  of size n means n space nodes and n implicit time steps.
* ``poisson`` — Laplace equation on the unit square with four Dirichlet side
  values plus a pinned centre value as the five input parameters. A mesh of
  size n means n cells (n+1 nodes) per side, so the centre node sits exactly
  at (1/2, 1/2) at every fidelity.
* ``heat`` — 1-D heat equation u_t = alpha u_xx on x in [0,1], t in [0,5],
  step initial condition H(x-1/4) - H(x-3/4), prescribed boundary fluxes
  alpha u_x(0) = -q_left and alpha u_x(1) = q_right. Backward Euler with
  ghost-node flux boundaries, which conserves the trapezoid heat integral
  exactly: I_{k+1} = I_k + dt (q_left + q_right).

Datasets pair nested uniformly-drawn inputs (each fidelity's design is a
subset of the previous one) with flattened aligned fields, plus a held-out
test split solved one mesh refinement above the highest training fidelity.
The directory format written here (manifest.json + little-endian row-major
float64 blobs) is the interchange contract with the model and the CLI.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

from . import numerics
from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    InvalidCounts,
    IoFailure,
    SolverDiverged,
)
from .mfmodel import MultiFidelityDataset

EQUATIONS = ("burgers", "poisson", "heat")

_DEFAULT_RANGES = {
    "burgers": ((0.001, 0.1),),
    "poisson": ((0.1, 0.9),) * 5,
    "heat": ((0.0, 1.0), (-1.0, 0.0), (0.01, 0.1)),
}
_DEFAULT_GRIDS = {
    "burgers": (128, 128),
    "poisson": (32, 32),
    "heat": (100, 100),
}
_DEFAULT_HORIZONS = {"burgers": 3.0, "poisson": None, "heat": 5.0}

_PICARD_TOL = 1e-12
_PICARD_MAX_ITERS = 100
_RESIDUAL_TOL = 1e-10

MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "mfhogp-dataset"


@dataclass(frozen=True)
class PdeSpec:
    """One PDE family with its parameter ranges and fidelity ladder."""

    equation: str
    input_ranges: tuple
    meshes: tuple
    output_grid: tuple
    time_horizon: float

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise InvalidCounts(f"unknown equation {self.equation!r}")
        object.__setattr__(
            self,
            "input_ranges",
            tuple((float(lo), float(hi)) for lo, hi in self.input_ranges),
        )
        object.__setattr__(self, "meshes", tuple(int(m) for m in self.meshes))
        object.__setattr__(self, "output_grid", tuple(int(g) for g in self.output_grid))
        if len(self.input_ranges) != len(_DEFAULT_RANGES[self.equation]):
            raise DimensionMismatch(
                f"{self.equation} takes {len(_DEFAULT_RANGES[self.equation])} "
                f"parameters, got {len(self.input_ranges)}"
            )
        if any(hi <= lo for lo, hi in self.input_ranges):
            raise InvalidCounts("every input range needs lo < hi")
        if not self.meshes or any(m < 2 for m in self.meshes):
            raise InvalidCounts(f"meshes must all be >= 2, got {self.meshes}")
        if any(b <= a for a, b in zip(self.meshes, self.meshes[1:])):
            raise InvalidCounts(
                f"meshes must strictly increase with fidelity, got {self.meshes}"
            )
        if len(self.output_grid) != 2 or any(g < 2 for g in self.output_grid):
            raise InvalidCounts(f"output grid must be two sizes >= 2, got {self.output_grid}")
        if min(self.output_grid) < max(self.meshes):
            raise InvalidCounts(
                f"output grid {self.output_grid} is coarser than the finest "
                f"training mesh {max(self.meshes)}"
            )

    @property
    def input_dim(self) -> int:
        return len(self.input_ranges)

    @property
    def output_dim(self) -> int:
        return self.output_grid[0] * self.output_grid[1]

    @property
    def num_levels(self) -> int:
        return len(self.meshes)

    @property
    def test_mesh(self) -> int:
        """Mesh one refinement (doubling) above the highest training fidelity."""
        return 2 * self.meshes[-1]


def make_spec(
    equation: str,
    meshes,
    output_grid=None,
    input_ranges=None,
    time_horizon=None,
) -> PdeSpec:
    """Spec with per-equation defaults for everything but the mesh ladder."""
    if equation not in EQUATIONS:
        raise InvalidCounts(f"unknown equation {equation!r}")
    return PdeSpec(
        equation,
        _DEFAULT_RANGES[equation] if input_ranges is None else tuple(input_ranges),
        tuple(meshes),
        _DEFAULT_GRIDS[equation] if output_grid is None else tuple(output_grid),
        _DEFAULT_HORIZONS[equation] if time_horizon is None else float(time_horizon),
    )


@dataclass
class SolutionField:
    """A solved instance aligned to the output grid, stored row-major."""

    grid_shape: tuple
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float64)
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if self.values.shape != self.grid_shape:
            raise DimensionMismatch(
                f"values {self.values.shape} do not match grid {self.grid_shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise SolverDiverged("solution field contains non-finite values")

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def interp_matrix(n_src: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights from n_src to n_out uniform nodes on [0,1].

    Rows sum to one, and a target node coinciding with a source node (up to
    a 1e-9 grid-index tolerance) copies it exactly.
    """
    if n_src < 2 or n_out < 1:
        raise DimensionMismatch(f"cannot interpolate {n_src} -> {n_out} nodes")
    pos = np.linspace(0.0, n_src - 1.0, n_out)
    i0 = np.minimum(pos.astype(np.intp), n_src - 2)
    frac = pos - i0
    frac[frac < 1e-9] = 0.0
    frac[frac > 1.0 - 1e-9] = 1.0
    weights = np.zeros((n_out, n_src))
    rows = np.arange(n_out)
    weights[rows, i0] = 1.0 - frac
    weights[rows, i0 + 1] = frac
    return weights


def align_field(values: np.ndarray, output_grid: tuple) -> np.ndarray:
    """Bilinear alignment of a uniform-grid field to the output grid."""
    values = np.atleast_2d(np.asarray(values, np.float64))
    row_w = interp_matrix(values.shape[0], output_grid[0])
    col_w = interp_matrix(values.shape[1], output_grid[1])
    return row_w @ values @ col_w.T


def burgers_trajectory(viscosity: float, mesh: int, time_horizon: float = 3.0) -> np.ndarray:
    """Raw Burgers solve: (mesh+1) time levels x mesh space nodes.

    Backward Euler with Picard iteration on the frozen convection velocity;
    upwind convection plus central diffusion gives a strictly diagonally
    dominant tridiagonal system, so the discrete maximum principle holds.
    """
    n = int(mesh)
    if n < 3:
        raise InvalidCounts(f"burgers needs at least 3 nodes, got {n}")
    h = 1.0 / (n - 1)
    dt = float(time_horizon) / n
    x = np.linspace(0.0, 1.0, n)
    u = np.sin(np.pi * x / 2.0)
    traj = np.empty((n + 1, n))
    traj[0] = u
    for k in range(n):
        u = _burgers_step(u, dt, h, float(viscosity), n)
        traj[k + 1] = u
    return traj


def _burgers_step(u_prev, dt, h, viscosity, n):
    nu = viscosity / h**2
    c = u_prev.copy()
    for _ in range(_PICARD_MAX_ITERS):
        cp = np.maximum(c[1:-1], 0.0)
        cm = np.minimum(c[1:-1], 0.0)
        ab = np.zeros((3, n))
        rhs = u_prev.copy()
        ab[1, 0] = 1.0
        ab[1, n - 1] = 1.0
        rhs[0] = 0.0
        rhs[n - 1] = 0.0
        ab[1, 1:-1] = 1.0 + dt * ((cp - cm) / h + 2.0 * nu)
        ab[0, 2:] = dt * (cm / h - nu)
        ab[2, : n - 2] = dt * (-cp / h - nu)
        try:
            u_new = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverDiverged(f"implicit step failed: {exc}") from exc
        if not np.all(np.isfinite(u_new)):
            raise SolverDiverged("non-finite values in implicit Burgers step")
        delta = float(np.max(np.abs(u_new - c)))
        c = u_new
        if delta < _PICARD_TOL:
            return c
    raise ConvergenceFailure(
        f"Picard iteration did not reach {_PICARD_TOL} in {_PICARD_MAX_ITERS} sweeps"
    )


def solve_burgers(viscosity: float, mesh: int, output_grid=(128, 128)) -> SolutionField:
    """Burgers solution aligned to the output grid (time rows x space cols).

    The first output row is the initial condition evaluated analytically on
    the output nodes, so it is exact at every fidelity.
    """
    traj = burgers_trajectory(viscosity, mesh)
    aligned = align_field(traj, output_grid)
    x_out = np.linspace(0.0, 1.0, output_grid[1])
    aligned[0] = np.sin(np.pi * x_out / 2.0)
    return SolutionField(tuple(output_grid), aligned)


def poisson_grid(
    b_left: float,
    b_right: float,
    b_top: float,
    b_bottom: float,
    center: float,
    mesh: int,
) -> np.ndarray:
    """Raw constrained-Laplace solve on a (mesh+1) x (mesh+1) node grid.

    Five-point Laplacian rows at free nodes; Dirichlet rows on the four
    sides (corners resolved in left, right, top, bottom assignment order,
    so corners take the top/bottom value) and at the exact-centre node.
    """
    n = int(mesh)
    if n < 2 or n % 2 != 0:
        raise InvalidCounts(f"poisson mesh must be an even cell count >= 2, got {n}")
    m = n + 1
    bc = np.full((m, m), np.nan)
    bc[:, 0] = b_left
    bc[:, -1] = b_right
    bc[0, :] = b_top
    bc[-1, :] = b_bottom
    ci = m // 2
    rows, cols, vals, rhs = [], [], [], np.zeros(m * m)
    for i in range(m):
        for j in range(m):
            k = i * m + j
            if np.isfinite(bc[i, j]):
                rows.append(k)
                cols.append(k)
                vals.append(1.0)
                rhs[k] = bc[i, j]
            elif i == ci and j == ci:
                rows.append(k)
                cols.append(k)
                vals.append(1.0)
                rhs[k] = center
            else:
                for col, val in (
                    (k, 4.0),
                    (k - m, -1.0),
                    (k + m, -1.0),
                    (k - 1, -1.0),
                    (k + 1, -1.0),
                ):
                    rows.append(k)
                    cols.append(col)
                    vals.append(val)
    a = csr_matrix((vals, (rows, cols)), shape=(m * m, m * m))
    u = spsolve(a, rhs)
    if not np.all(np.isfinite(u)):
        raise SolverDiverged("non-finite values in Laplace solve")
    residual = float(np.max(np.abs(a @ u - rhs)))
    if residual >= _RESIDUAL_TOL:
        raise SolverDiverged(f"Laplace residual {residual:.2e} >= {_RESIDUAL_TOL}")
    return u.reshape(m, m)


def solve_poisson(
    b_left: float,
    b_right: float,
    b_top: float,
    b_bottom: float,
    center: float,
    mesh: int,
    output_grid=(32, 32),
) -> SolutionField:
    """Constrained-Laplace solution aligned to the output grid."""
    grid = poisson_grid(b_left, b_right, b_top, b_bottom, center, mesh)
    return SolutionField(tuple(output_grid), align_field(grid, output_grid))


def heat_trajectory(
    flux_left: float,
    flux_right: float,
    conductivity: float,
    mesh: int,
    time_horizon: float = 5.0,
) -> np.ndarray:
    """Raw heat solve: (mesh+1) time levels x mesh space nodes.

    Ghost-node flux boundaries make the trapezoid heat integral obey
    I_{k+1} = I_k + dt (q_left + q_right) exactly, so insulated runs
    conserve heat to rounding.
    """
    n = int(mesh)
    if n < 3:
        raise InvalidCounts(f"heat needs at least 3 nodes, got {n}")
    h = 1.0 / (n - 1)
    dt = float(time_horizon) / n
    x = np.linspace(0.0, 1.0, n)
    u = np.where((x > 0.25) & (x < 0.75), 1.0, 0.0)
    u[np.isclose(x, 0.25, rtol=0.0, atol=1e-12)] = 0.5
    u[np.isclose(x, 0.75, rtol=0.0, atol=1e-12)] = 0.5
    r = float(conductivity) * dt / h**2
    ab = np.zeros((3, n))
    ab[1, :] = 1.0 + 2.0 * r
    ab[0, 1:] = -r
    ab[2, : n - 1] = -r
    ab[0, 1] = -2.0 * r
    ab[2, n - 2] = -2.0 * r
    source = np.zeros(n)
    source[0] = 2.0 * dt * float(flux_left) / h
    source[n - 1] = 2.0 * dt * float(flux_right) / h
    traj = np.empty((n + 1, n))
    traj[0] = u
    for k in range(n):
        u = solve_banded((1, 1), ab, u + source)
        if not np.all(np.isfinite(u)):
            raise SolverDiverged("non-finite values in implicit heat step")
        traj[k + 1] = u
    return traj


def solve_heat(
    flux_left: float,
    flux_right: float,
    conductivity: float,
    mesh: int,
    output_grid=(100, 100),
) -> SolutionField:
    """Heat solution aligned to the output grid (time rows x space cols)."""
    traj = heat_trajectory(flux_left, flux_right, conductivity, mesh)
    return SolutionField(tuple(output_grid), align_field(traj, output_grid))


def solve_instance(spec: PdeSpec, params, mesh: int) -> np.ndarray:
    """Flattened aligned field for one parameter vector at one mesh."""
    params = np.asarray(params, np.float64).reshape(-1)
    if params.shape != (spec.input_dim,):
        raise DimensionMismatch(
            f"{spec.equation} takes {spec.input_dim} parameters, got {params.size}"
        )
    if spec.equation == "burgers":
        traj = burgers_trajectory(params[0], mesh, spec.time_horizon)
        aligned = align_field(traj, spec.output_grid)
        aligned[0] = np.sin(np.pi * np.linspace(0.0, 1.0, spec.output_grid[1]) / 2.0)
        field = SolutionField(spec.output_grid, aligned)
    elif spec.equation == "poisson":
        field = solve_poisson(*params, mesh, spec.output_grid)
    else:
        traj = heat_trajectory(params[0], params[1], params[2], mesh, spec.time_horizon)
        field = SolutionField(spec.output_grid, align_field(traj, spec.output_grid))
    return field.flat()


def _draw_inputs(spec: PdeSpec, rng: numerics.RngStream, count: int) -> np.ndarray:
    cols = [rng.uniform(lo, hi, count) for lo, hi in spec.input_ranges]
    return np.column_stack(cols)


def generate_dataset(
    spec: PdeSpec,
    counts,
    rng: numerics.RngStream,
    test_count: int = 112,
) -> MultiFidelityDataset:
    """Nested multi-fidelity dataset plus a higher-fidelity test split.

    Level-1 inputs are uniform over the spec ranges; each higher level keeps
    a random subset of the previous level's rows (index maps recorded), so
    designs are nested by construction. Test inputs are fresh draws solved
    at one mesh refinement above the highest training fidelity.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != spec.num_levels:
        raise InvalidCounts(
            f"{len(counts)} counts for {spec.num_levels} fidelity meshes"
        )
    if any(c < 1 for c in counts):
        raise InvalidCounts(f"counts must be positive, got {counts}")
    if any(b >= a for a, b in zip(counts, counts[1:])):
        raise InvalidCounts(f"counts must strictly decrease, got {counts}")
    if test_count < 0:
        raise InvalidCounts(f"test count must be >= 0, got {test_count}")
    xs = [_draw_inputs(spec, rng.child(0), counts[0])]
    maps = [None]
    for i in range(1, spec.num_levels):
        picked = rng.child(i).choice_without_replacement(counts[i - 1], counts[i])
        xs.append(xs[i - 1][picked])
        maps.append(picked)
    ys = [
        np.stack([solve_instance(spec, row, mesh) for row in x])
        for x, mesh in zip(xs, spec.meshes)
    ]
    x_test = y_test = None
    if test_count > 0:
        x_test = _draw_inputs(spec, rng.child(spec.num_levels), test_count)
        y_test = np.stack(
            [solve_instance(spec, row, spec.test_mesh) for row in x_test]
        )
    data = MultiFidelityDataset(xs, ys, maps, x_test, y_test)
    data.validate()
    return data


def _write_f64(path: Path, array: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_f64(path: Path, shape: tuple) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    expect = int(np.prod(shape)) * 8
    if len(raw) != expect:
        raise IoFailure(f"{path} holds {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_dataset(
    directory,
    data: MultiFidelityDataset,
    spec: PdeSpec,
    seed: int,
) -> dict:
    """Write the dataset directory (manifest.json + .f64 blobs); returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": _MANIFEST_FORMAT,
        "version": 1,
        "equation": spec.equation,
        "input_ranges": [list(r) for r in spec.input_ranges],
        "meshes": list(spec.meshes),
        "test_mesh": spec.test_mesh,
        "output_grid": list(spec.output_grid),
        "time_horizon": spec.time_horizon,
        "num_levels": data.num_levels,
        "counts": list(data.counts),
        "input_dim": data.input_dim,
        "output_dim": data.output_dim,
        "test_count": 0 if data.x_test is None else int(data.x_test.shape[0]),
        "seed": int(seed),
        "parent_maps": [
            None if m is None else [int(v) for v in m] for m in data.parent_maps
        ],
    }
    for i in range(1, data.num_levels + 1):
        _write_f64(directory / f"x_{i}.f64", data.xs[i - 1])
        _write_f64(directory / f"y_{i}.f64", data.ys[i - 1])
    if data.x_test is not None:
        _write_f64(directory / "x_test.f64", data.x_test)
        _write_f64(directory / "y_test.f64", data.y_test)
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def load_dataset(directory):
    """Read a dataset directory back; returns (dataset, manifest)."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read dataset manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"malformed dataset manifest: {exc}") from exc
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise IoFailure(f"not a dataset manifest: {directory / MANIFEST_NAME}")
    counts = manifest["counts"]
    s, d = manifest["input_dim"], manifest["output_dim"]
    xs, ys = [], []
    for i in range(1, manifest["num_levels"] + 1):
        xs.append(_read_f64(directory / f"x_{i}.f64", (counts[i - 1], s)))
        ys.append(_read_f64(directory / f"y_{i}.f64", (counts[i - 1], d)))
    maps = [
        None if m is None else np.asarray(m, dtype=np.intp)
        for m in manifest["parent_maps"]
    ]
    x_test = y_test = None
    if manifest["test_count"] > 0:
        x_test = _read_f64(directory / "x_test.f64", (manifest["test_count"], s))
        y_test = _read_f64(directory / "y_test.f64", (manifest["test_count"], d))
    data = MultiFidelityDataset(xs, ys, maps, x_test, y_test)
    data.validate()
    return data, manifest


@dataclass(frozen=True)
class Preset:
    """A named end-to-end generation setting."""

    name: str
    spec: PdeSpec
    counts: tuple
    test_count: int


def _preset(name, equation, meshes, counts, test_count, output_grid=None) -> Preset:
    return Preset(
        name, make_spec(equation, meshes, output_grid), tuple(counts), test_count
    )


PRESETS = {
    p.name: p
    for p in (
        _preset("burgers-i", "burgers", (16,), (400,), 112),
        _preset("burgers-ii", "burgers", (16, 32), (400, 4), 112),
        _preset("burgers-iii", "burgers", (16, 32, 64), (400, 40, 4), 112),
        _preset("poisson-i", "poisson", (8,), (400,), 112),
        _preset("poisson-ii", "poisson", (8, 16), (400, 10), 112),
        _preset("heat-i", "heat", (16,), (400,), 112),
        _preset("heat-ii", "heat", (16, 32), (400, 4), 112),
        _preset("burgers-i-small", "burgers", (16,), (100,), 30),
        _preset("burgers-ii-small", "burgers", (16, 32), (100, 4), 30),
        _preset("burgers-iii-small", "burgers", (16, 32, 64), (100, 10, 4), 30),
        _preset("poisson-i-small", "poisson", (8,), (100,), 30),
        _preset("poisson-ii-small", "poisson", (8, 16), (100, 10), 30),
        _preset("heat-i-small", "heat", (16,), (100,), 30),
        _preset("heat-ii-small", "heat", (16, 32), (100, 4), 30),
        _preset("poisson-smoke", "poisson", (4, 8), (20, 4), 10, output_grid=(8, 8)),
    )
}
