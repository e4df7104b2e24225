"""Optical orthogonal codes: generation, correlation, spreading and reuse planning."""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from models.errors import InfeasibleError, ParameterError

logger = logging.getLogger(__name__)

SCHEMES = ("ocdma-reuse", "wdm-ocdma")

# Unit axial steps around a hexagon, counter-clockwise from east.
HEX_DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


def _check_params(F, W, rho):
    if F < 1 or W < 1 or rho < 1:
        raise ParameterError(f"OOC parameters must be positive, got ({F}, {W}, {rho})")
    if W > F:
        raise ParameterError(f"weight {W} exceeds code length {F}")
    if W > 1 and rho >= W:
        raise ParameterError(f"max correlation {rho} must be below weight {W}")


@dataclass(frozen=True)
class OocCode:
    """An (F, W, rho) signature given by its mark-chip positions."""

    length: int
    weight: int
    max_correlation: int
    marks: tuple

    def __post_init__(self):
        _check_params(self.length, self.weight, self.max_correlation)
        marks = tuple(int(m) for m in self.marks)
        object.__setattr__(self, "marks", marks)
        if len(set(marks)) != self.weight or len(marks) != self.weight:
            raise ParameterError(f"code needs {self.weight} distinct marks, got {marks}")
        if list(marks) != sorted(marks) or marks[0] < 0 or marks[-1] >= self.length:
            raise ParameterError(f"marks must be sorted indices in [0, {self.length}), got {marks}")
        if self.weight > 1 and correlation_profile(self, self)[1:].max() > self.max_correlation:
            raise ParameterError(f"code {marks} violates the autocorrelation constraint")

    def chips(self):
        """Returns the code as a length-F 0/1 vector."""
        chips = np.zeros(self.length, dtype=np.int8)
        chips[list(self.marks)] = 1
        return chips

    def shifted(self, shift):
        """Returns the code cyclically delayed by `shift` chips."""
        marks = sorted((m + shift) % self.length for m in self.marks)
        return OocCode(self.length, self.weight, self.max_correlation, tuple(marks))


@dataclass
class OocFamily:
    length: int
    weight: int
    max_correlation: int
    codes: list = field(default_factory=list)
    shortfall: bool = False

    def __post_init__(self):
        for code in self.codes:
            if (code.length, code.weight, code.max_correlation) != (self.length, self.weight, self.max_correlation):
                raise ParameterError("all codes of a family must share (F, W, rho)")

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def __getitem__(self, index):
        return self.codes[index]


@dataclass
class ChipSequence:
    chips: np.ndarray
    chip_time: float | None = None

    def bit_time(self, length):
        """Bit duration Tb = F * Tc."""
        if self.chip_time is None:
            return None
        return self.chip_time * length


@dataclass(frozen=True)
class CapacityPlan:
    n_codes: int
    n_obts: int
    scheme: str = "ocdma-reuse"
    n_wavelengths: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ParameterError(f"unknown scheme '{self.scheme}', expected one of {SCHEMES}")
        if min(self.n_codes, self.n_obts, self.n_wavelengths) < 1:
            raise ParameterError("capacity plan fields must be positive")


def johnson_bound(F, W, rho):
    """
    Nested-floor Johnson bound on the size of an (F, W, rho) code family.

    Args:
        F (int): Code length in chips.
        W (int): Code weight.
        rho (int): Maximum auto/cross correlation.

    Returns:
        int: floor((1/W) floor((F-1)/(W-1) ... floor((F-rho)/(W-rho)))).
    """
    _check_params(F, W, rho)
    if W == 1:
        return F
    value = (F - rho) // (W - rho)
    for k in range(rho - 1, 0, -1):
        value = ((F - k) * value) // (W - k)
    return value // W


def correlation_profile(a, b):
    """Cyclic correlation of `a` against `b` at every shift 0..F-1."""
    if a.length != b.length:
        raise ParameterError(f"code lengths differ: {a.length} vs {b.length}")
    diffs = (np.asarray(b.marks)[None, :] - np.asarray(a.marks)[:, None]) % a.length
    return np.bincount(diffs.ravel(), minlength=a.length)


def correlation(a, b, shift):
    """Returns sum_j a[j] * b[(j + shift) mod F]."""
    return int(correlation_profile(a, b)[shift % a.length])


def verify_family(family):
    """Exhaustively checks every shifted autocorrelation and every pairwise cross-correlation."""
    rho = family.max_correlation
    for code in family:
        if family.weight > 1 and correlation_profile(code, code)[1:].max() > rho:
            return False
    for a, b in itertools.combinations(family.codes, 2):
        if correlation_profile(a, b).max() > rho:
            return False
    return True


class _BudgetExhausted(Exception):
    pass


class _FamilySearch:
    """Randomised depth-first code search with backtracking against a growing family."""

    def __init__(self, F, W, rho, rng, max_attempts):
        self.F, self.W, self.rho = F, W, rho
        self.rng = rng
        self.max_attempts = max_attempts
        self.attempts = 0
        self.family_marks = []

    def next_code(self):
        marks = [0]
        auto = [0] * self.F
        cross = []
        for other in self.family_marks:
            counts = [0] * self.F
            for c in other:
                counts[c % self.F] += 1
            cross.append(counts)
        if self._extend(marks, auto, cross):
            return tuple(marks)
        return None

    def _try_add(self, m, marks, auto, cross):
        touched = []
        ok = True
        for x in marks:
            for s in ((m - x) % self.F, (x - m) % self.F):
                auto[s] += 1
                touched.append((auto, s))
                if auto[s] > self.rho:
                    ok = False
        for counts, other in zip(cross, self.family_marks):
            for c in other:
                s = (c - m) % self.F
                counts[s] += 1
                touched.append((counts, s))
                if counts[s] > self.rho:
                    ok = False
        if not ok:
            for counts, s in touched:
                counts[s] -= 1
            return None
        return touched

    def _extend(self, marks, auto, cross):
        remaining = self.W - len(marks)
        if remaining == 0:
            return True
        last = marks[-1]
        for m in self.rng.permutation(np.arange(last + 1, self.F - remaining + 1)):
            self.attempts += 1
            if self.attempts > self.max_attempts:
                raise _BudgetExhausted
            touched = self._try_add(int(m), marks, auto, cross)
            if touched is None:
                continue
            marks.append(int(m))
            if self._extend(marks, auto, cross):
                return True
            marks.pop()
            for counts, s in touched:
                counts[s] -= 1
        return False


def generate_family(F, W, rho, max_count, seed, max_attempts=200_000):
    """
    Builds a family of up to `max_count` codes by greedy randomised search.

    Every code is normalised to carry a mark at chip 0. The search is
    deterministic for a given seed. When the attempt budget runs out, or no
    further code fits, the codes found so far are returned with the
    shortfall flag set.

    Args:
        F (int): Code length.
        W (int): Code weight.
        rho (int): Correlation constraint.
        max_count (int): Number of codes requested.
        seed (int): Seed of the search order.
        max_attempts (int): Candidate-mark evaluations allowed for the whole family.

    Returns:
        OocFamily: The codes found.
    """
    bound = johnson_bound(F, W, rho)
    if max_count < 1:
        raise ParameterError(f"max_count must be positive, got {max_count}")
    target = min(max_count, bound)

    if W == 1:
        codes = [OocCode(F, 1, rho, (i,)) for i in range(target)]
        return OocFamily(F, W, rho, codes, shortfall=target < max_count)

    search = _FamilySearch(F, W, rho, np.random.default_rng(seed), max_attempts)
    best = []
    exhausted = False
    # A dead end restarts the family with the next draws of the same stream.
    while len(best) < target and not exhausted:
        search.family_marks = []
        while len(search.family_marks) < target:
            try:
                marks = search.next_code()
            except _BudgetExhausted:
                logger.info("OOC search budget of %d attempts exhausted", max_attempts)
                exhausted = True
                break
            if marks is None:
                break
            search.family_marks.append(marks)
        if len(search.family_marks) > len(best):
            best = list(search.family_marks)
    codes = [OocCode(F, W, rho, marks) for marks in best]

    shortfall = len(codes) < max_count
    if shortfall:
        logger.warning("OOC (%d,%d,%d): found %d of %d requested codes (Johnson bound %d)",
                       F, W, rho, len(codes), max_count, bound)
    return OocFamily(F, W, rho, codes, shortfall=shortfall)


def spread(bits, code, chip_time=None):
    """
    On-off keyed spreading: bit 1 sends the code pattern, bit 0 sends F dark chips.

    Args:
        bits (iterable[int]): Data bits.
        code (OocCode): Signature of the user.
        chip_time (float | None): Chip duration Tc in seconds.

    Returns:
        ChipSequence: Concatenated chip frames.
    """
    pattern = code.chips()
    dark = np.zeros(code.length, dtype=np.int8)
    frames = [pattern if int(b) else dark for b in bits]
    chips = np.concatenate(frames) if frames else np.zeros(0, dtype=np.int8)
    return ChipSequence(chips, chip_time)


def despread_chip_level(chips, code, threshold):
    """Hard-limits each mark chip and returns 1 only when all W marks are ON."""
    frame = np.asarray(chips, dtype=float)
    if frame.shape != (code.length,):
        raise ParameterError(f"frame must hold {code.length} chips, got {frame.shape}")
    return int(np.all(frame[list(code.marks)] > threshold))


def despread(chips, code, threshold):
    """Applies `despread_chip_level` frame by frame."""
    chips = np.asarray(chips, dtype=float)
    if chips.size % code.length:
        raise ParameterError("chip stream is not a whole number of frames")
    frames = chips.reshape(-1, code.length)
    return np.array([despread_chip_level(f, code, threshold) for f in frames], dtype=np.int8)


def synchronous_shifts(family, n_users):
    """
    Picks one cyclic shift per user so that all downlink signatures have disjoint marks.

    The base station clocks every downlink stream, so it is free to choose
    each user's chip offset. Shifts are searched lowest first.

    Args:
        family (OocFamily): Source codes; user i gets a shift of code i.
        n_users (int): Number of synchronous users.

    Returns:
        list[OocCode]: Shifted codes, one per user.
    """
    if n_users > len(family):
        raise InfeasibleError(f"{n_users} users need {n_users} codes, family holds {len(family)}")
    F = family.length

    def place(i, used):
        if i == n_users:
            return []
        for shift in range(F):
            code = family[i].shifted(shift)
            if used.isdisjoint(code.marks):
                rest = place(i + 1, used | set(code.marks))
                if rest is not None:
                    return [code] + rest
        return None

    codes = place(0, frozenset())
    if codes is None:
        raise InfeasibleError(f"no disjoint shift assignment for {n_users} users with F={F}")
    return codes


def is_mai_free_synchronous(codes, threshold=0.5):
    """Brute-forces every data combination and reports whether any decision is changed by interference."""
    codes = list(codes)
    patterns = np.array([c.chips() for c in codes], dtype=float)
    for desired, code in enumerate(codes):
        others = np.delete(patterns, desired, axis=0)
        for other_bits in itertools.product((0, 1), repeat=len(codes) - 1):
            interference = np.asarray(other_bits, dtype=float) @ others if len(others) else 0.0
            for bit in (0, 1):
                frame = bit * patterns[desired] + interference
                if despread_chip_level(frame, code, threshold) != bit:
                    return False
    return True


def hex_cell_coordinates(n_rings):
    """Axial coordinates of a hexagonal cluster: centre first, then ring by ring."""
    cells = [(0, 0)]
    for k in range(1, n_rings + 1):
        q, r = HEX_DIRECTIONS[4][0] * k, HEX_DIRECTIONS[4][1] * k
        for dq, dr in HEX_DIRECTIONS:
            for _ in range(k):
                cells.append((q, r))
                q, r = q + dq, r + dr
    return cells


def hex_cells(n_rings):
    """
    Adjacency map of a hexagonal cell cluster.

    Args:
        n_rings (int): Rings of cells around the centre cell (1 gives the 7-cell flower).

    Returns:
        dict[int, set[int]]: Cell index to neighbouring cell indices.
    """
    coords = hex_cell_coordinates(n_rings)
    index = {c: i for i, c in enumerate(coords)}
    adjacency = {}
    for i, (q, r) in enumerate(coords):
        adjacency[i] = {index[(q + dq, r + dr)] for dq, dr in HEX_DIRECTIONS if (q + dq, r + dr) in index}
    return adjacency


def assign_code_subsets(cells, n_subsets=3):
    """
    Proper colouring of the cell graph with code subsets, lowest subset first.

    Args:
        cells (dict[int, set[int]]): Cell adjacency.
        n_subsets (int): Number of disjoint code subsets.

    Returns:
        dict[int, int]: Cell to subset index (0 is S1).
    """
    order = sorted(cells)
    colours = {}

    def colour(pos):
        if pos == len(order):
            return True
        cell = order[pos]
        taken = {colours[n] for n in cells[cell] if n in colours}
        for subset in range(n_subsets):
            if subset in taken:
                continue
            colours[cell] = subset
            if colour(pos + 1):
                return True
            del colours[cell]
        return False

    if not colour(0):
        raise InfeasibleError(f"cell graph is not colourable with {n_subsets} code subsets")
    return colours


def channel_assignment(cells, n_codes, n_wavelengths=1, scheme="ocdma-reuse"):
    """
    Lists the (wavelength, code) channels each cell may use under strict three-way partitioning.

    OCDMA reuse splits the codes into three subsets; WDM/OCDMA splits the
    wavelengths into three groups and every cell uses all codes on its group.

    Returns:
        dict[int, list[tuple[int, int]]]: Cell to channel list.
    """
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme '{scheme}'")
    subsets = assign_code_subsets(cells, 3)
    plan = {}
    for cell, subset in subsets.items():
        if scheme == "ocdma-reuse":
            size = n_codes // 3
            plan[cell] = [(0, code) for code in range(subset * size, (subset + 1) * size)]
        else:
            size = n_wavelengths // 3
            waves = range(subset * size, (subset + 1) * size)
            plan[cell] = [(w, code) for w in waves for code in range(n_codes)]
    return plan


def network_capacity(plan):
    """Simultaneous users supported by the network under the plan's scheme."""
    if plan.scheme == "ocdma-reuse":
        return (plan.n_codes // 3) * plan.n_obts
    return (plan.n_wavelengths // 3) * plan.n_codes * plan.n_obts


def write_family(family, path):
    """Writes the header `F W rho` then one space-separated code per line."""
    with open(path, "w") as f:
        f.write(f"{family.length} {family.weight} {family.max_correlation}\n")
        for code in family:
            f.write(" ".join(str(m) for m in code.marks) + "\n")


def read_family(path):
    """Reads a family written by `write_family`: an "F W rho" header, then one line of marks per code."""
    with open(path) as f:
        lines = [line.split() for line in f if line.strip()]
    if not lines or len(lines[0]) != 3:
        raise ParameterError(f"{path}: missing 'F W rho' header")
    F, W, rho = (int(v) for v in lines[0])
    codes = [OocCode(F, W, rho, tuple(int(m) for m in line)) for line in lines[1:]]
    return OocFamily(F, W, rho, codes)
