"""Training losses for both phases, each a pure differentiable function.

Tensors use their trailing two dimensions as the spatial grid; any leading
dimensions (batch, channel) are averaged where the definition calls for a
mean. Adversarial losses accept scalar scores or tensors of per-sample
scores and reduce them by mean, so the hand-substitution examples and the
batched training path share one code path.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateInputError, DomainError, NumericalError, ShapeError

# Log arguments are clamped to this interval: standard GAN hygiene so a
# saturated discriminator cannot produce infinities.
LOG_EPS = 1e-7

_SOBEL_X = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
)
_SOBEL_Y = torch.tensor(
    [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]]
)


@dataclass
class LossWeights:
    """Scalar weights composing the phase-1 and phase-2 objectives.

    ``sigma`` blends the correlation and content terms of the phase-1
    autoencoder loss; ``epsilon_cc`` keeps the correlation-ratio denominator
    positive (low-branch correlation is never below -1).
    """

    lambda_adv: float = 0.1
    sigma: float = 0.5
    gamma_text: float = 1.0
    gamma_int: float = 1.0
    gamma_temp: float = 0.5
    epsilon_cc: float = 1.01

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise DomainError(f"sigma must be in [0, 1], got {self.sigma}")
        if not self.epsilon_cc > 1.0:
            raise DomainError(f"epsilon_cc must exceed 1, got {self.epsilon_cc}")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_scores(*scores):
    out = []
    for s in scores:
        t = _as_tensor(s)
        if not torch.isfinite(t).all():
            raise DomainError("discriminator score is not finite")
        if (t < 0).any() or (t > 1).any():
            raise DomainError(
                f"discriminator score outside [0, 1]: {t.detach().reshape(-1)[:4].tolist()}"
            )
        out.append(t)
    return out


def _log(x):
    return torch.log(torch.clamp(x, min=LOG_EPS, max=1.0 - LOG_EPS))


def correlation_coefficient(a, b):
    """Pearson correlation over all flattened elements of two equal-shape maps."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "correlation_coefficient")
    af = a.reshape(-1)
    bf = b.reshape(-1)
    ac = af - af.mean()
    bc = bf - bf.mean()
    var_a = (ac * ac).sum()
    var_b = (bc * bc).sum()
    if var_a.detach().item() == 0.0 or var_b.detach().item() == 0.0:
        raise DegenerateInputError("correlation undefined for zero-variance input")
    return (ac * bc).sum() / torch.sqrt(var_a * var_b)


def correlation_decomposition_loss(emb_a, emb_b, w):
    """Ratio driving high-frequency branches apart while keeping low ones aligned.

    Computes CC_high^2 / (CC_low + epsilon) over the encoder branch maps of
    the two modalities; finite for every input because CC_low >= -1 and
    epsilon > 1.
    """
    cc_high = correlation_coefficient(emb_a.high, emb_b.high)
    cc_low = correlation_coefficient(emb_a.low, emb_b.low)
    return cc_high * cc_high / (cc_low + w.epsilon_cc)


def _gaussian_window(size, sigma, dtype, device):
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords * coords) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim_index(x, y, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Mean local SSIM with a Gaussian window, differentiable.

    The window shrinks to the largest odd size that fits when the image is
    smaller than the nominal 11x11 support; borders are reflect-padded so
    the local statistics cover every pixel.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    _check_same_shape(x, y, "ssim_index")
    h, w = x.shape[-2], x.shape[-1]
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    xm = x.reshape(-1, 1, h, w)
    ym = y.reshape(-1, 1, h, w)
    g = _gaussian_window(win, sigma, x.dtype, x.device)
    kernel = torch.outer(g, g).reshape(1, 1, win, win)
    pad = win // 2

    def blur(t):
        return F.conv2d(F.pad(t, (pad, pad, pad, pad), mode="reflect"), kernel)

    mu_x = blur(xm)
    mu_y = blur(ym)
    sig_x = blur(xm * xm) - mu_x * mu_x
    sig_y = blur(ym * ym) - mu_y * mu_y
    sig_xy = blur(xm * ym) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_x + sig_y + c2)
    return (num / den).mean()


def content_loss(x, x_rec):
    """Reconstruction fidelity: squared L2 norm plus the SSIM complement.

    The L2 term is the per-image sum of squared errors (averaged over any
    leading batch dimension), matching the norm in the phase-1 objective.
    """
    x, x_rec = _as_tensor(x), _as_tensor(x_rec)
    _check_same_shape(x, x_rec, "content_loss")
    diff = x - x_rec
    per_image_sse = (diff * diff).sum(dim=(-2, -1))
    return per_image_sse.mean() + (1.0 - ssim_index(x, x_rec))


def adversarial_loss_ae_phase1(score_a_rec, score_b_rec):
    """Autoencoder-side adversarial term on reconstruction scores.

    Mean of log(1 - s) per discriminator, summed; minimizing drives the
    discriminator scores of the reconstructions toward 1.
    """
    sa, sb = _check_scores(score_a_rec, score_b_rec)
    return _log(1.0 - sa).mean() + _log(1.0 - sb).mean()


def adversarial_loss_disc_phase1(score_real, score_fake):
    """Discriminator binary cross-entropy: real toward 1, reconstruction toward 0."""
    sr, sf = _check_scores(score_real, score_fake)
    return -_log(sr).mean() - _log(1.0 - sf).mean()


def phase1_ae_loss(adv, corr, content, w):
    """Phase-1 autoencoder objective: lambda*adv + sigma*corr + (1-sigma)*content."""
    adv, corr, content = _as_tensor(adv), _as_tensor(corr), _as_tensor(content)
    total = w.lambda_adv * adv + w.sigma * corr + (1.0 - w.sigma) * content
    if not torch.isfinite(total.detach()).all():
        raise NumericalError("phase-1 AE loss is not finite")
    return total


def sobel_gradient(img):
    """Per-pixel Sobel gradient magnitude (|gx| + |gy|), reflect-padded borders."""
    img = _as_tensor(img)
    h, w = img.shape[-2], img.shape[-1]
    t = img.reshape(-1, 1, h, w)
    kx = _SOBEL_X.to(dtype=img.dtype, device=img.device).reshape(1, 1, 3, 3)
    ky = _SOBEL_Y.to(dtype=img.dtype, device=img.device).reshape(1, 1, 3, 3)
    padded = F.pad(t, (1, 1, 1, 1), mode="reflect")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    return (gx.abs() + gy.abs()).reshape(img.shape)


def text_loss(fused, a, b):
    """Texture term: mean |grad(fused) - max(grad(a), grad(b))| per pixel."""
    fused, a, b = _as_tensor(fused), _as_tensor(a), _as_tensor(b)
    _check_same_shape(fused, a, "text_loss")
    _check_same_shape(fused, b, "text_loss")
    target = torch.maximum(sobel_gradient(a), sobel_gradient(b))
    return (sobel_gradient(fused) - target).abs().mean()


def intensity_loss(fused, a, b):
    """Intensity term: mean |fused - max(a, b)| per pixel."""
    fused, a, b = _as_tensor(fused), _as_tensor(a), _as_tensor(b)
    _check_same_shape(fused, a, "intensity_loss")
    _check_same_shape(fused, b, "intensity_loss")
    return (fused - torch.maximum(a, b)).abs().mean()


def temporal_consistency_loss(fused_t, fused_prev):
    """Mean absolute difference of consecutive fused frames; 0 with no predecessor."""
    fused_t = _as_tensor(fused_t)
    if fused_prev is None:
        return torch.zeros((), dtype=fused_t.dtype, device=fused_t.device)
    fused_prev = _as_tensor(fused_prev)
    _check_same_shape(fused_t, fused_prev, "temporal_consistency_loss")
    return (fused_t - fused_prev).abs().mean()


def adversarial_loss_phase2(score_a, score_b, role):
    """Phase-2 adversarial term with the fused image as the fake sample.

    role="ae": both arguments are discriminator scores of the fused image;
    returns the summed mean log(1 - s) terms. role="dm": arguments are one
    discriminator's (real source score, fused score); returns the phase-1
    style binary cross-entropy.
    """
    if role == "ae":
        sa, sb = _check_scores(score_a, score_b)
        return _log(1.0 - sa).mean() + _log(1.0 - sb).mean()
    if role == "dm":
        return adversarial_loss_disc_phase1(score_a, score_b)
    raise DomainError(f"unknown adversarial role '{role}', expected 'ae' or 'dm'")


def phase2_total_loss(adv, text, intensity, temporal, w):
    """Phase-2 autoencoder objective: adv + g_text*text + g_int*int + g_temp*temp."""
    adv, text, intensity, temporal = (
        _as_tensor(adv),
        _as_tensor(text),
        _as_tensor(intensity),
        _as_tensor(temporal),
    )
    total = adv + w.gamma_text * text + w.gamma_int * intensity + w.gamma_temp * temporal
    if not torch.isfinite(total.detach()).all():
        raise NumericalError("phase-2 AE loss is not finite")
    return total
