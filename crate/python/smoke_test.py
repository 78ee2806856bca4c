"""Smoke test for the Python bindings: build with `maturin develop` in crates/py."""

import far


def main():
    data = far.Dataset.synthetic("two_gaussians", 4, 64, seed=1, mu=2.0)
    test = far.Dataset.synthetic("two_gaussians", 4, 16, seed=2, mu=2.0)
    model = far.Model.mlp(4, [8], 2, activation="softplus", beta=2.0).initialize("GN", 0)
    print(model)

    cfg = {"objective": "nat", "epochs": 3, "batch_size": 16, "seed": 0, "optimizer": {"lr": 0.05},
           "attack": {"norm": "inf", "epsilon": 0.3, "step_size": 0.1, "iterations": 2, "restarts": 1}}
    model, epochs = far.train(model, data, cfg)
    print("train", [round(e["loss"], 4) for e in epochs])

    x, y = test.sample(0)
    assert len(model.forward(x)) == 2
    ig = far.integrated_gradients(model, x, model.predict(x), steps=32)
    sal = far.saliency(model, x, model.predict(x))
    assert len(ig) == len(sal) == 4
    assert far.kendall_tau(ig, ig) == 1.0
    assert far.top_k_intersection(ig, ig, 2) == 1.0

    attack = far.ifia_config(0.3, 2, test.bounds)
    attack["attribution"] = {"method": "IG", "steps": 8}
    out = far.attack(model, x, attack, method="ifia")
    assert max(abs(a - b) for a, b in zip(out["x_adv"], x)) <= 0.3 + 1e-12
    print("ifia", out["final_dissimilarity"], out["prediction_preserved"])
    out = far.attack(model, x, far.pgd_config(0.3, test.bounds), method="pgd", label=y)
    print("pgd", out["final_objective"])

    ev = far.eval_config(0.3, 2)
    ev.update(samples=8, ig_steps=16)
    ev["ifia"].update(iterations=2, restarts=1)
    ev["ifia"]["attribution"] = {"method": "IG", "steps": 8}
    report = far.evaluate(model, test, ev)
    print("evaluate", {k: report[k] for k in ("natural_accuracy", "adversarial_accuracy", "top_k_intersection", "kendall_tau")})

    try:
        far.train(model, data, dict(cfg, lambda_=1))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown keys must be rejected")
    print("ok")


if __name__ == "__main__":
    main()
