"""Command-line surface: data generation, training, rounds, eval, serving."""

from __future__ import annotations

import json
import sys
import time

import click
import numpy as np

from .data import (Dataset, SyntheticSpec, annotation_query, checkpoint_load,
                   checkpoint_save, dataset_load, dataset_save,
                   generate_synthetic, split_dataset)
from .loop import (CERConfig, OracleConfig, RoundState, TrainConfig,
                   evaluate_model, oracle_annotate, pretrain, run_round)
from .model import AttentionNetwork, ModelConfig
from .nap import AdaptConfig, AnnotationStore, AttentionMask, NeuralAttentionProcess
from .service import AnnotationSession, create_app


@click.group()
def main():
    """Interactive attention learning workbench."""


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--n", default=600, show_default=True)
@click.option("--t", default=6, show_default=True)
@click.option("--d", default=12, show_default=True)
@click.option("--task", default="binary", show_default=True,
              type=click.Choice(["binary", "multiclass", "regression"]))
@click.option("--sparsity", default=8, show_default=True)
@click.option("--noise", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def gen_data(out, n, t, d, task, sparsity, noise, seed):
    """Generate a synthetic dataset with known relevance cells."""
    ds = generate_synthetic(SyntheticSpec(n=n, t=t, d=d, task=task,
                                          sparsity=sparsity, noise_std=noise,
                                          seed=seed))
    dataset_save(ds, out)
    click.echo(f"wrote {len(ds)} instances (T={t}, D={d}, task={task}) to {out}")


def _load_config_file(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _load_splits(data_path, split_seed):
    ds = dataset_load(data_path)
    return split_dataset(ds, seed=split_seed)


def _load_store(store_path, shape) -> AnnotationStore:
    store = AnnotationStore()
    if store_path:
        try:
            for rec in annotation_query(store_path, shape):
                store.append(rec["round"],
                             AttentionMask(rec["instance_id"],
                                           rec["feature_mask"],
                                           rec["time_mask"]))
        except FileNotFoundError:
            pass
    return store


@main.command("pretrain")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--task", default="binary", show_default=True,
              type=click.Choice(["binary", "multiclass", "regression"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
def pretrain_cmd(data_path, config_path, out, task, seed, split_seed):
    """Train the attention model without any annotation conditioning."""
    cfg_file = _load_config_file(config_path)
    train, valid, _ = _load_splits(data_path, split_seed)
    model_kw = dict(T=train.T, D=train.D, L=train.L, task=task)
    model_kw.update(cfg_file.get("model", {}))
    config = ModelConfig(**model_kw)
    net = AttentionNetwork(config)
    train_kw = dict(seed=seed)
    train_kw.update(cfg_file.get("train", {}))
    tc = TrainConfig(**train_kw)
    t0 = time.time()
    params, log = pretrain(net, train, valid, tc)
    checkpoint_save(out, params, config, round_s=0,
                    extra={"train_config": tc.__dict__,
                           "split_seed": split_seed})
    click.echo(f"pretrained {len(log.train_losses)} epochs "
               f"(best epoch {log.best_epoch}, val loss "
               f"{min(log.val_losses):.4f}) in {time.time() - t0:.1f}s -> {out}")


@main.command("round")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", required=True, type=click.Path())
@click.option("--inst-scorer", default="uncertainty", show_default=True,
              type=click.Choice(["influence", "uncertainty", "random"]))
@click.option("--feat-scorer", default="counterfactual", show_default=True,
              type=click.Choice(["influence", "uncertainty", "counterfactual",
                                 "random"]))
@click.option("--p", "p_", default=20, show_default=True)
@click.option("--k", "k_", default=16, show_default=True)
@click.option("--f", "f_", default=4, show_default=True)
@click.option("--annotator", default="oracle", show_default=True,
              type=click.Choice(["oracle", "serve"]))
@click.option("--oracle-noise", default=0.0, show_default=True)
@click.option("--oracle-idk", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--adapt-steps", default=1200, show_default=True)
@click.option("--adapt-lr", default=1e-3, show_default=True)
@click.option("--out", "out_path", type=click.Path(),
              help="Updated checkpoint path (defaults to --ckpt).")
@click.option("--metrics-out", type=click.Path(),
              help="Append a metrics record for the round here.")
@click.option("--port", default=8000, show_default=True,
              help="Port when --annotator serve.")
def round_cmd(ckpt, data_path, store_path, inst_scorer, feat_scorer, p_, k_,
              f_, annotator, oracle_noise, oracle_idk, seed, split_seed,
              adapt_steps, adapt_lr, out_path, metrics_out, port):
    """Run one rerank/annotate/recondition round."""
    params, config, meta = checkpoint_load(ckpt)
    net = AttentionNetwork(config)
    nap = NeuralAttentionProcess(net)
    train, valid, test = _load_splits(data_path, split_seed)
    store = _load_store(store_path, (config.T, config.D))
    s_prev = meta["round"]
    adapt_config = AdaptConfig(steps=adapt_steps, lr=adapt_lr, seed=seed,
                               weight_decay=float(meta["extra"].get(
                                   "train_config", {}).get("weight_decay", 0.0)))
    out_path = out_path or ckpt

    if annotator == "serve":
        session = AnnotationSession(net, train, valid, test, params,
                                    store=store, store_path=store_path,
                                    adapt_config=adapt_config,
                                    start_round=s_prev, seed=seed)
        session.advance_round(p_, k_, f_, inst_scorer, feat_scorer, block=True)
        click.echo(f"round {s_prev + 1} open with {k_} instances; serving "
                   f"on :{port} until all masks arrive")
        _serve_until_idle(session, port)
        checkpoint_save(out_path, session.params, config,
                        round_s=session.round, extra=meta["extra"])
        if metrics_out and session.metrics_records:
            _append_record(metrics_out, session.metrics_records[-1])
        click.echo(f"round {session.round} closed -> {out_path}")
        return

    cer = CERConfig(P=p_, K=k_, F=f_, inst_scorer=inst_scorer,
                    feat_scorer=feat_scorer)
    oracle = OracleConfig(noise_rate=oracle_noise, idk_rate=oracle_idk)
    state = RoundState(s=s_prev, params_hash=params.digest())
    train_index = train.by_id()

    def annotate(report, index):
        masks = oracle_annotate(report, index, oracle, seed=seed)
        from .data import annotation_append
        for m in masks:
            annotation_append(store_path, m.instance_id, s_prev + 1,
                              m.feature_mask, m.time_mask)
        return masks

    new_state, new_params = run_round(state, net, nap, train, valid, test,
                                      store, params, cer, annotate,
                                      adapt_config, seed=seed)
    checkpoint_save(out_path, new_params, config, round_s=new_state.s,
                    extra=meta["extra"])
    record = {"schema": "metrics/v1", "round": new_state.s,
              **new_state.metrics}
    if metrics_out:
        _append_record(metrics_out, record)
    click.echo(json.dumps(record))
    click.echo(f"round {new_state.s} complete -> {out_path} "
               f"(store {len(store)} masks)")


def _append_record(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _serve_until_idle(session, port):
    import threading

    import uvicorn

    app = create_app(session)
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=port,
                                           log_level="warning"))

    def watch():
        while True:
            time.sleep(0.5)
            if session.state in ("idle", "error") and session.round >= 1:
                server.should_exit = True
                return

    threading.Thread(target=watch, daemon=True).start()
    server.run()


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", type=click.Path())
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "valid", "test"]))
@click.option("--split-seed", default=0, show_default=True)
def eval_cmd(ckpt, data_path, store_path, split, split_seed):
    """Evaluate a checkpoint on one split under the current annotations."""
    params, config, meta = checkpoint_load(ckpt)
    net = AttentionNetwork(config)
    nap = NeuralAttentionProcess(net)
    train, valid, test = _load_splits(data_path, split_seed)
    store = _load_store(store_path, (config.T, config.D))
    target = {"train": train, "valid": valid, "test": test}[split]
    metrics = evaluate_model(net, nap, params, store, target, config.task,
                             {i.id: i.x for i in train})
    click.echo(json.dumps({"schema": "metrics/v1", "round": meta["round"],
                           "split": split, **metrics}))


@main.command("serve")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", type=click.Path())
@click.option("--port", default=8000, show_default=True)
@click.option("--split-seed", default=0, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True),
              help="Static directory with the annotation UI build.")
def serve_cmd(ckpt, data_path, store_path, port, split_seed, ui_dir):
    """Serve the annotation gateway (and optionally the browser UI)."""
    import uvicorn

    params, config, meta = checkpoint_load(ckpt)
    net = AttentionNetwork(config)
    train, valid, test = _load_splits(data_path, split_seed)
    store = _load_store(store_path, (config.T, config.D))
    session = AnnotationSession(net, train, valid, test, params, store=store,
                                store_path=store_path,
                                start_round=meta["round"])
    app = create_app(session)
    if ui_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    click.echo(f"serving on http://127.0.0.1:{port} (round {session.round})")
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")


@main.command("check")
@click.option("--gradients", "which", flag_value="gradients", default=True)
@click.option("--influence", "which", flag_value="influence")
def check_cmd(which):
    """Run the built-in oracle suites (finite differences / LOO influence)."""
    if which == "gradients":
        ok = _check_gradients()
    else:
        ok = _check_influence()
    sys.exit(0 if ok else 1)


def _check_gradients() -> bool:
    from .gradients import finite_diff_check

    ok = True
    for seed in range(3):
        cfg = ModelConfig(T=4, D=6, L=1, task="binary", hidden_beta=8,
                          hidden_gamma=8, latent_dim=4, r_dim=8)
        net = AttentionNetwork(cfg)
        params = net.init_params(seed)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, cfg.T, cfg.D))
        y = rng.integers(0, 2, (4, 1)).astype(float)
        report = finite_diff_check(lambda p, b: net.batch_loss(p, b),
                                   params, (x, y))
        line = f"seed {seed}: max relative error {report.max_rel_err:.2e}"
        passed = report.max_rel_err < 1e-4
        ok &= passed
        click.echo(f"[{'PASS' if passed else 'FAIL'}] {line}")
    return ok


def _check_influence(n: int = 24, m: int = 6, d: int = 4, reg: float = 0.05) -> bool:
    """Influence scores vs true leave-one-out retraining on a convex model."""
    from scipy.optimize import minimize
    from scipy.stats import spearmanr

    from . import tensor as tt
    from .params import ParamVector
    from .rerank import InfluenceEngine
    from .tensor import Tensor

    def np_risk(w, X, y):
        p = 1 / (1 + np.exp(-(X @ w)))
        eps = 1e-12
        return float(np.mean(-(y * np.log(p + eps)
                               + (1 - y) * np.log(1 - p + eps)))
                     + 0.5 * reg * w @ w)

    def np_grad(w, X, y):
        p = 1 / (1 + np.exp(-(X @ w)))
        return X.T @ (p - y) / len(y) + reg * w

    def fit(X, y, w0):
        return minimize(np_risk, w0, args=(X, y), jac=np_grad,
                        method="L-BFGS-B",
                        options={"gtol": 1e-12, "maxiter": 500}).x

    def point_loss(p, point):
        x, y = point
        logit = (Tensor(np.ravel(x)[None]) @ p["w"].reshape(-1, 1)).reshape(1)
        prob = tt.clip(tt.sigmoid(logit), 1e-12, 1 - 1e-12)
        yv = float(np.ravel(y)[0])
        return -(Tensor(yv) * tt.log(prob)
                 + Tensor(1.0 - yv) * tt.log(Tensor(1.0) - prob)).sum()

    def val_loss(w, Xv, yv):
        p = 1 / (1 + np.exp(-(Xv @ w)))
        eps = 1e-12
        return float(np.sum(-(yv * np.log(p + eps)
                              + (1 - yv) * np.log(1 - p + eps))))

    ok = True
    for seed in range(2):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, d))
        Xv = rng.standard_normal((m, d))
        w_true = rng.standard_normal(d)
        y = (X @ w_true + 0.5 * rng.standard_normal(n) > 0).astype(float)
        yv = (Xv @ w_true + 0.5 * rng.standard_normal(m) > 0).astype(float)
        w_hat = fit(X, y, np.zeros(d))

        def risk_fn(p, _):
            logits = (Tensor(X) @ p["w"].reshape(-1, 1)).reshape(n)
            prob = tt.clip(tt.sigmoid(logits), 1e-12, 1 - 1e-12)
            yt = Tensor(y)
            ce = -(yt * tt.log(prob)
                   + (Tensor(1.0) - yt) * tt.log(Tensor(1.0) - prob))
            return ce.mean() + Tensor(0.5 * reg) * tt.square(p["w"]).sum()

        engine = InfluenceEngine(risk_fn, point_loss, ParamVector({"w": w_hat}),
                                 [(Xv[j], yv[j]) for j in range(m)],
                                 damping=0.01, cg_max_iter=200, cg_tol=1e-10)
        scores = np.array([engine.influence_of((X[i], y[i])) for i in range(n)])
        base = val_loss(w_hat, Xv, yv)
        deltas = []
        for i in range(n):
            keep = np.arange(n) != i
            deltas.append(val_loss(fit(X[keep], y[keep], w_hat), Xv, yv) - base)
        rho = float(spearmanr(scores, -np.asarray(deltas)).statistic)
        passed = rho >= 0.7
        ok &= passed
        click.echo(f"[{'PASS' if passed else 'FAIL'}] seed {seed}: "
                   f"Spearman(influence, -LOO delta) = {rho:.3f}")
    return ok


if __name__ == "__main__":
    main()
