import json

import pytest

from trail._validation import ContractError
from trail.evaluation.results import AttackResult, read_results, write_result


def _r(i=3, **kw):
    base = dict(
        image_id=i, method="pgd", surrogate="s", true_label=2, predictions={"s": 1, "t": 2}, ssim=0.8,
        losses={"l_adv": -0.5}, jpeg_predictions={"s": 2, "t": 2}, adversarial_png="images/00003.png", wall_clock=1.25,
    )
    base.update(kw)
    return AttackResult(**base)


def test_success_flags():
    r = _r()
    assert r.success == {"s": True, "t": False}
    assert r.jpeg_success == {"s": False, "t": False}


def test_json_round_trip_drops_wall_clock():
    r = _r()
    line = r.to_json()
    assert "wall_clock" not in json.loads(line)
    back = AttackResult.from_json(line)
    assert back.predictions == r.predictions and back.ssim == r.ssim and back.wall_clock == 0.0


def test_inconsistent_success_rejected():
    d = json.loads(_r().to_json())
    d["success"]["t"] = True
    with pytest.raises(ContractError):
        AttackResult.from_json(json.dumps(d))


def test_write_and_read(tmp_path):
    write_result(tmp_path, _r(1))
    write_result(tmp_path, _r(0))
    (tmp_path / "records" / "00007.jsonl").write_text("{not json\n")
    results, errors = read_results(tmp_path)
    assert [r.image_id for r in results] == [0, 1]
    assert list(errors) == ["00007.jsonl"]


def test_serialisation_is_stable():
    assert _r().to_json() == _r(wall_clock=99.0).to_json()
