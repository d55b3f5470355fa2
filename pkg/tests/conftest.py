"""Shared fixtures: stub endpoint factory, clients, catalog, data paths."""

from __future__ import annotations

from pathlib import Path

import pytest

from ehrllm.client import ChatClient, EndpointConfig
from ehrllm.records import FeatureCatalog, parse_records

from stub_server import StubServer

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def stub():
    """Factory starting stub servers that are torn down after the test."""
    servers: list[StubServer] = []

    def _start(script=None, **kwargs) -> StubServer:
        server = StubServer(script=script, **kwargs)
        server.start()
        servers.append(server)
        return server

    yield _start
    for server in servers:
        server.stop()


@pytest.fixture
def make_client():
    """Factory for ChatClients pointed at a stub, with fast retry backoff."""

    def _make(server: StubServer, **overrides) -> ChatClient:
        settings = {
            "base_url": server.base_url,
            "model": "stub-model",
            "backoff_base_s": 0.01,
            "backoff_cap_s": 0.05,
            "timeout_s": 5.0,
        }
        settings.update(overrides)
        return ChatClient(EndpointConfig(**settings))

    return _make


@pytest.fixture(scope="session")
def catalog() -> FeatureCatalog:
    return FeatureCatalog.default()


@pytest.fixture(scope="session")
def reference_record(catalog):
    """The checked-in demo admission whose block matches the golden file."""
    result = parse_records(DATA_DIR / "reference_record.jsonl", catalog)
    assert not result.rejections
    return result.records[0]


def data_path(name: str) -> Path:
    return DATA_DIR / name
