import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from utils.errors import PolicyCodecError, ShapeMismatchError, SpecError
from utils.model import (
    POLICY_HEADER,
    STATE_DIM,
    UNDECIDED,
    LayerKind,
    PartialPolicy,
    Phase,
    QbnPolicy,
    avg_act_qbn,
    avg_weight_qbn,
    decode_policy_file,
    encode_policy_file,
    encode_state,
    layer_avg_weight_qbn,
    pack_policy,
    parse_network_spec,
    policy_from_json,
    policy_to_json,
    read_policy_file,
    serialize_network,
    unpack_policy,
    write_policy_file,
)


def conv_layer(c_in, c_out, **extra):
    layer = {
        "kind": "conv",
        "c_in": c_in,
        "c_out": c_out,
        "kernel": 3,
        "stride": 1,
        "feature": 8,
        "macs_per_kernel": 100,
        "act_sensitivity": 1.0,
        "kernels": [{"variance": 0.1 * (k + 1)} for k in range(c_out)],
    }
    layer.update(extra)
    return layer


def network_text(*layers, name="net"):
    return json.dumps({"name": name, "acc_fp": 0.9, "layers": list(layers)})


def test_minimal_conv_document_parses():
    net = parse_network_spec(network_text(conv_layer(3, 2)))
    assert net.n_layer == 1
    assert net.layers[0].kind is LayerKind.CONV
    assert net.n_kernels == 2


def test_fully_connected_with_kernel_3_is_rejected():
    layer = conv_layer(4, 2, kind="fully-connected", kernel=3, stride=0)
    with pytest.raises(SpecError, match="kernel"):
        parse_network_spec(network_text(layer))


def test_depthwise_requires_matching_channels():
    layer = conv_layer(4, 2, kind="depthwise-conv")
    with pytest.raises(SpecError, match="layers\\[0\\].c_out"):
        parse_network_spec(network_text(layer))


def test_kernel_count_mismatch_names_the_layer():
    layer = conv_layer(3, 2)
    layer["kernels"] = layer["kernels"][:1]
    with pytest.raises(SpecError, match="layers\\[0\\].kernels"):
        parse_network_spec(network_text(layer))


def test_malformed_json_reports_line():
    with pytest.raises(SpecError) as info:
        parse_network_spec('{\n  "name": "x",\n  "layers": [\n')
    assert info.value.line is not None
    assert str(info.value).startswith("line ")


def test_tiny2x2_fixture(tiny2x2):
    assert tiny2x2.n_layer == 2
    assert tiny2x2.n_kernels == 4
    assert tiny2x2.n_entries == 6
    assert parse_network_spec(serialize_network(tiny2x2)) == tiny2x2


def test_serialize_parse_identity_with_weights(toy_classifier):
    assert toy_classifier.weights is not None
    assert parse_network_spec(serialize_network(toy_classifier)) == toy_classifier


def test_first_state_has_zero_position_and_history(tiny2x2):
    state = encode_state(tiny2x2, 0, 0, Phase.WEIGHT, 0.0, 0.0)
    assert state.layer == 0.0
    assert state.kernel == 0.0
    assert state.prev_goal == 0.0
    assert state.prev_action == 0.0
    assert state.weight_activation == 0.0


def test_last_layer_activation_state(tiny2x2):
    state = encode_state(tiny2x2, 1, 0, Phase.ACTIVATION, 0.5, 0.25)
    assert state.layer == 1.0
    assert state.weight_activation == 1.0
    assert state.prev_goal == 0.5


def test_fully_connected_state_encodes_kernel_one_stride_zero(tiny2x2):
    state = encode_state(tiny2x2, 1, 1, Phase.WEIGHT, 0.0, 0.0)
    assert state.kernel_size == pytest.approx(1 / 3)
    assert state.stride == 0.0
    assert state.depthwise == 0.0
    assert state.kernel == 0.5


def test_state_index_out_of_range(tiny2x2):
    with pytest.raises(IndexError):
        encode_state(tiny2x2, 2, 0, Phase.WEIGHT, 0.0, 0.0)
    with pytest.raises(IndexError):
        encode_state(tiny2x2, 0, 2, Phase.WEIGHT, 0.0, 0.0)


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    position=st.integers(min_value=0, max_value=15),
    phase=st.sampled_from(list(Phase)),
    prev_goal=st.floats(min_value=0.0, max_value=1.0),
    prev_action=st.floats(min_value=0.0, max_value=1.0),
)
def test_state_components_stay_in_unit_interval(tiny4x4, position, phase, prev_goal, prev_action):
    layer, kernel = divmod(position, 4)
    values = encode_state(tiny4x4, layer, kernel, phase, prev_goal, prev_action).as_array()
    assert values.shape == (STATE_DIM,)
    assert ((values >= 0.0) & (values <= 1.0)).all()


def test_depthwise_flag(tiny4x4):
    assert encode_state(tiny4x4, 1, 0, Phase.WEIGHT, 0.0, 0.0).depthwise == 1.0


def test_avg_weight_qbn_examples():
    net = parse_network_spec(network_text(conv_layer(3, 2), conv_layer(2, 3)))
    assert avg_weight_qbn(net, QbnPolicy.uniform(net, 4, 4)) == 4.0
    assert avg_weight_qbn(net, QbnPolicy(((2, 4), (3, 3, 6)), (4, 4))) == pytest.approx(3.6)
    assert avg_weight_qbn(net, QbnPolicy.uniform(net, 0, 1)) == 0.0


def test_avg_weight_qbn_ignores_kernel_order():
    net = parse_network_spec(network_text(conv_layer(3, 2), conv_layer(2, 3)))
    a = QbnPolicy(((2, 4), (3, 3, 6)), (4, 4))
    b = QbnPolicy(((4, 2), (6, 3, 3)), (4, 4))
    assert avg_weight_qbn(net, a) == avg_weight_qbn(net, b)
    assert layer_avg_weight_qbn(net, a) == [3.0, 4.0]


def test_avg_act_qbn_examples(tiny2x2):
    assert avg_act_qbn(tiny2x2, QbnPolicy.uniform(tiny2x2, 4, 4)) == 4.0
    assert avg_act_qbn(tiny2x2, QbnPolicy(((4, 4), (4, 4)), (1, 8))) == 4.5
    single = parse_network_spec(network_text(conv_layer(3, 2)))
    assert avg_act_qbn(single, QbnPolicy(((4, 4),), (5,))) == 5.0


def test_shape_mismatch(tiny2x2):
    with pytest.raises(ShapeMismatchError):
        avg_weight_qbn(tiny2x2, QbnPolicy(((4, 4, 4), (4, 4)), (4, 4)))


def test_qbn_ranges_are_enforced():
    with pytest.raises(SpecError):
        QbnPolicy(((9,),), (4,))
    with pytest.raises(SpecError):
        QbnPolicy(((4,),), (0,))


def test_pack_length_and_nibble_order():
    payload = pack_policy(QbnPolicy(((2, 8),), (4,)))
    assert len(payload) == 2
    assert payload == bytes([0x24, 0x08])


def test_tiny2x2_policy_is_three_bytes(tiny2x2):
    policy = QbnPolicy(((2, 1), (1, 2)), (1, 2))
    payload = pack_policy(policy)
    assert len(payload) * 8 == 24
    assert unpack_policy(payload, tiny2x2) == policy


def test_pack_unpack_exhaustive_on_small_net():
    net = parse_network_spec(network_text(conv_layer(3, 1), conv_layer(1, 1)))
    for act0 in range(1, 9):
        for w0 in range(9):
            for act1 in (1, 8):
                for w1 in (0, 8):
                    policy = QbnPolicy(((w0,), (w1,)), (act0, act1))
                    assert unpack_policy(pack_policy(policy), net) == policy


def test_pack_unpack_random_policies(tiny4x4):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        policy = QbnPolicy.from_flat(
            tiny4x4, rng.integers(0, 9, size=tiny4x4.n_kernels), rng.integers(1, 9, size=tiny4x4.n_layer)
        )
        assert unpack_policy(pack_policy(policy), tiny4x4) == policy


def test_unpack_rejects_bad_payloads(tiny2x2):
    with pytest.raises(PolicyCodecError):
        unpack_policy(b"\x44\x44", tiny2x2)
    with pytest.raises(PolicyCodecError, match="nibble value"):
        unpack_policy(b"\x49\x44\x44", tiny2x2)


def test_unpack_rejects_nonzero_padding():
    net = parse_network_spec(network_text(conv_layer(3, 2)))
    with pytest.raises(PolicyCodecError, match="padding"):
        unpack_policy(bytes([0x24, 0x18]), net)


def test_policy_file_round_trip(tiny2x2, tmp_path):
    policy = QbnPolicy(((2, 1), (1, 2)), (1, 2))
    data = encode_policy_file(policy, tiny2x2)
    assert data[:8] == b"AUTOQPOL"
    assert len(data) == POLICY_HEADER.size + 3 + 2 + len("tiny2x2")
    assert decode_policy_file(data, tiny2x2) == policy
    path = write_policy_file(tmp_path / "p.bin", policy, tiny2x2)
    assert read_policy_file(path, tiny2x2) == policy


def test_policy_file_rejects_other_network(tiny2x2, tiny4x4):
    data = encode_policy_file(QbnPolicy.uniform(tiny2x2, 4, 4), tiny2x2)
    with pytest.raises(PolicyCodecError):
        decode_policy_file(data, tiny4x4)
    with pytest.raises(PolicyCodecError, match="magic"):
        decode_policy_file(b"NOTAPOLICY" + data[10:], tiny2x2)


def test_policy_json_mirror(tiny2x2, tmp_path):
    policy = QbnPolicy(((2, 1), (1, 2)), (1, 2))
    text = policy_to_json(policy, tiny2x2)
    assert json.loads(text)["network"] == "tiny2x2"
    assert policy_from_json(text, tiny2x2) == policy
    path = tmp_path / "p.json"
    path.write_text(text)
    assert read_policy_file(path, tiny2x2) == policy


def test_partial_policy_completion(tiny2x2):
    partial = PartialPolicy.empty(tiny2x2)
    assert (partial.weights == UNDECIDED).all()
    partial = partial.with_act(0, 3).with_weight(tiny2x2, 0, 1, 5)
    assert not partial.is_complete
    completed = partial.complete(tiny2x2, fill_weight=0, fill_act=1)
    assert completed == QbnPolicy(((0, 5), (0, 0)), (3, 1))
    full = PartialPolicy.from_policy(completed)
    assert full.is_complete
