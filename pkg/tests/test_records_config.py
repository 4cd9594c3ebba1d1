"""Binary tensor container and key = value config files."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from multiqt import config, records
from multiqt.model import ModelConfig
from multiqt.train import TrainConfig


def test_byte_layout():
    data = records.encode(b"TEST", {"k": 1}, {"w": np.array([1.5], np.float32)})
    head = b'{"k":1}'
    expected = (b"TEST" + struct.pack("<II", 1, len(head)) + head + struct.pack("<I", 1)
                + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 1, 1) + struct.pack("<I", 1)
                + struct.pack("<f", 1.5))
    assert data == expected


@settings(max_examples=50, deadline=None)
@given(arr=hnp.arrays(st.sampled_from([np.float32, np.float64, np.int32]), hnp.array_shapes(max_dims=3)))
def test_round_trip_is_bit_exact(arr):
    data = records.encode(b"MQTM", {"a": [1, 2]}, {"x": arr})
    header, tensors = records.decode(data, b"MQTM")
    assert header == {"a": [1, 2]}
    assert tensors["x"].dtype == arr.dtype
    assert tensors["x"].tobytes() == arr.tobytes()
    assert records.encode(b"MQTM", header, tensors) == data


def test_decode_errors():
    data = records.encode(b"MQTM", {}, {"x": np.zeros(3, np.float32)})
    with pytest.raises(records.FormatError, match="magic"):
        records.decode(data, b"MQTD")
    with pytest.raises(records.FormatError, match="truncated"):
        records.decode(data[:-1], b"MQTM")
    with pytest.raises(records.FormatError, match="trailing"):
        records.decode(data + b"\0", b"MQTM")
    with pytest.raises(records.FormatError, match="version"):
        records.decode(data[:4] + struct.pack("<I", 7) + data[8:], b"MQTM")


def test_config_parse_and_round_trip():
    cfg = config.parse_text("lr = 0.01\nprecise_bn = no  # comment\nepochs = 3\n", TrainConfig())
    assert cfg.lr == 0.01 and cfg.precise_bn is False and cfg.epochs == 3
    assert config.parse_text(config.to_text(cfg), TrainConfig()) == cfg
    m = config.parse_text("trunk = (8, 8)\naudio_layers = ((3, 4, 2), (3, 4, 2), (3, 4, 2))", ModelConfig())
    assert m.trunk == (8, 8)


@pytest.mark.parametrize("text,line", [("lr = fast", 1), ("\nnope = 1", 2), ("epochs", 1)])
def test_config_errors_cite_line(text, line):
    with pytest.raises(config.ConfigError, match=f"<config>:{line}"):
        config.parse_text(text, TrainConfig())


def test_config_validation_error_surfaces():
    with pytest.raises(config.ConfigError):
        config.parse_text("multitask_beta = 2", TrainConfig())
