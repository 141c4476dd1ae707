from __future__ import annotations

from datetime import datetime

import pytest

from raildelay.ingest import ObservationEvent


def ev(
    id: int,
    time: str,
    rp: str,
    obs_type: str,
    delay: int,
    train: int,
    rank: int | None = None,
) -> ObservationEvent:
    return ObservationEvent(
        id=id,
        time=datetime.strptime(time, "%Y-%m-%d %H:%M:%S"),
        rp=rp,
        obs_type=obs_type,
        delay=delay,
        train_number=train,
        rank=rank,
    )


@pytest.fixture
def make_event():
    return ev
