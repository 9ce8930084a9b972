"""Smoke test for the gestureforge Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
"""
import math
import os
import tempfile

import gestureforge as gf


def main():
    data = gf.gen_gesture_dataset(["victory", "rock"], per_class=30, background=30, seed=3)
    assert len(data) == 90
    frame, label = data[0]
    assert label == "victory" and len(frame.points) == 21
    assert len(gf.normalize_landmarks(frame)) == 63

    moved = gf.FrameLandmarks([[x + 0.1, y - 0.2, z] for x, y, z in frame.points], frame.handedness)
    assert max(abs(a - b) for a, b in zip(frame.normalized(), moved.normalized())) < 1e-12
    assert gf.mnae([frame], [frame]) == 0.0

    try:
        gf.FrameLandmarks(frame.points[:20])
        raise AssertionError("20-point frame accepted")
    except ValueError:
        pass

    loss, grad, infeasible = gf.ctc_loss([[math.log(0.5), math.log(0.5)]], [1])
    assert abs(loss - math.log(2)) < 1e-12 and not infeasible and len(grad) == 1
    assert abs(gf.ss_f1(0.8, 0.9) - 0.8470588) < 1e-7
    assert gf.ss_f1(0.3, 0.6) + gf.complementary_ss_f1(0.3, 0.6) == 1.0

    embedder = gf.EmbeddingModel(seed=0)
    left, right = data[1][0], data[2][0]
    assert embedder.embed_frame([left, right]) == embedder.embed_frame([right, left])

    model = gf.train(embedder, data, "finetune", k=20, seed=1, epochs=20)
    assert model.label_map == ["background", "rock", "victory"]
    report = gf.evaluate(model, data)
    print("ss_f1 on training pool:", round(report["ss_f1"], 4))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.gfm")
        model.save(path)
        loaded = gf.GestureModel.load(path)
        assert loaded.probabilities([frame]) == model.probabilities([frame])
    print("top prediction:", model.predict([frame])[0])
    print("python smoke test passed")


if __name__ == "__main__":
    main()
