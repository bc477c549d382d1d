"""Columnar container for synthetic workers and its CSV form."""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd

POPULATION_COLUMNS = ["id", "gender", "dob_month", "z", "c1", "c2", "s_pre", "pfa",
                      "recipient", "death_age_months"]


def month_index(label: str) -> int:
    """'YYYY-MM' -> months since year 0."""
    year, month = label.split("-")
    m = int(month)
    if not 1 <= m <= 12:
        raise ValueError(f"bad month in {label!r}")
    return int(year) * 12 + m - 1


def month_label(index: int) -> str:
    return f"{index // 12:04d}-{index % 12 + 1:02d}"


@dataclass
class Population:
    """One row per worker, stored column-wise.

    ``dob_month`` holds month indices (see :func:`month_index`);
    ``death_age_months`` uses -1 for "not observed".
    """

    id: np.ndarray
    gender: np.ndarray
    dob_month: np.ndarray
    z: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    s_pre: np.ndarray
    pfa: np.ndarray
    recipient: np.ndarray
    death_age_months: np.ndarray

    def __post_init__(self):
        self.id = np.asarray(self.id, dtype=np.int64)
        self.gender = np.asarray(self.gender, dtype="<U1")
        self.dob_month = np.asarray(self.dob_month, dtype=np.int64)
        for name in ("z", "c1", "c2", "s_pre"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.pfa = np.asarray(self.pfa, dtype=np.int64)
        self.recipient = np.asarray(self.recipient, dtype=bool)
        self.death_age_months = np.asarray(self.death_age_months, dtype=np.int64)
        n = self.id.shape[0]
        for f in fields(self):
            if getattr(self, f.name).shape != (n,):
                raise ValueError(f"column {f.name} has wrong length")

    def __len__(self) -> int:
        return int(self.id.shape[0])

    def validate(self) -> list[str]:
        problems = []
        if len(np.unique(self.id)) != len(self):
            problems.append("duplicate worker ids")
        if not np.all(np.isin(self.gender, ["F", "M"])):
            problems.append("gender must be F or M")
        if np.any(~np.isfinite(self.z)) or np.any(self.z < 0):
            problems.append("z must be finite and >= 0")
        for name in ("c1", "c2"):
            col = getattr(self, name)
            if np.any(~np.isfinite(col)) or np.any(col <= 0):
                problems.append(f"{name} must be finite and > 0")
        if np.any(self.s_pre < 0):
            problems.append("s_pre must be >= 0")
        return problems

    def take(self, index) -> "Population":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return Population(**{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def sorted_by_id(self) -> "Population":
        return self.take(np.argsort(self.id, kind="stable"))

    def replace_columns(self, **cols) -> "Population":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(cols)
        return Population(**data)

    @classmethod
    def homogeneous(cls, n: int, z: float = 1.0, c1: float = 1.0, c2: float = 0.8,
                    recipient: bool = False) -> "Population":
        return cls(
            id=np.arange(n), gender=np.full(n, "F"), dob_month=np.full(n, month_index("1950-01")),
            z=np.full(n, z), c1=np.full(n, c1), c2=np.full(n, c2), s_pre=np.zeros(n),
            pfa=np.zeros(n), recipient=np.full(n, recipient), death_age_months=np.full(n, -1),
        )

    @classmethod
    def from_arrays(cls, z, c1, c2, recipient=None, **extra) -> "Population":
        z = np.asarray(z, dtype=float)
        n = z.shape[0]
        base = cls.homogeneous(n)
        cols = dict(z=z, c1=c1, c2=c2)
        if recipient is not None:
            cols["recipient"] = recipient
        cols.update(extra)
        return base.replace_columns(**cols)

    def to_frame(self) -> pd.DataFrame:
        death = pd.array(self.death_age_months, dtype="Int64")
        death[self.death_age_months < 0] = pd.NA
        return pd.DataFrame({
            "id": self.id,
            "gender": self.gender,
            "dob_month": [month_label(m) for m in self.dob_month],
            "z": self.z,
            "c1": self.c1,
            "c2": self.c2,
            "s_pre": self.s_pre,
            "pfa": self.pfa,
            "recipient": self.recipient.astype(int),
            "death_age_months": death,
        })

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "Population":
        missing = [c for c in POPULATION_COLUMNS if c not in df.columns]
        if missing:
            raise ValueError(f"population is missing columns {missing}")
        death = pd.to_numeric(df["death_age_months"], errors="coerce").fillna(-1)
        return cls(
            id=df["id"].to_numpy(), gender=df["gender"].astype(str).to_numpy(),
            dob_month=np.array([month_index(s) for s in df["dob_month"].astype(str)]),
            z=df["z"].to_numpy(), c1=df["c1"].to_numpy(), c2=df["c2"].to_numpy(),
            s_pre=df["s_pre"].to_numpy(), pfa=df["pfa"].to_numpy(),
            recipient=df["recipient"].astype(int).to_numpy().astype(bool),
            death_age_months=death.to_numpy().astype(np.int64),
        )

    def to_csv(self, path_or_buf=None, float_format: str = "%.17g") -> str | None:
        return self.to_frame().to_csv(path_or_buf, index=False, float_format=float_format,
                                      lineterminator="\n")

    @classmethod
    def read_csv(cls, path_or_buf) -> "Population":
        if isinstance(path_or_buf, str) and "\n" in path_or_buf:
            path_or_buf = io.StringIO(path_or_buf)
        return cls.from_frame(pd.read_csv(path_or_buf, dtype={"dob_month": str}, comment="#",
                                        float_precision="round_trip"))
