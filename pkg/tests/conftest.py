import numpy as np


def activate_latent_columns(params, cfg, seed=0, scale=0.5):
    """Give the (inert-at-init) latent head columns random weights.

    Tests that exercise conditioning on an untrained model need the latent
    pathway live; training normally populates these during adaptation.
    """
    rng = np.random.default_rng(seed)
    hb = params["head_beta.w"].copy()
    hb[cfg.hidden_beta:] = scale * rng.standard_normal(hb[cfg.hidden_beta:].shape)
    hg = params["head_gamma.w"].copy()
    hg[cfg.hidden_gamma:] = scale * rng.standard_normal(hg[cfg.hidden_gamma:].shape)
    return params.with_updates({"head_beta.w": hb, "head_gamma.w": hg})
