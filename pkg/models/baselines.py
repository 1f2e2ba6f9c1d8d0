"""
Reference methods sharing the COIN pipeline.

Vanilla SDS and noise optimization reuse the staged optimizer with a different
strategy; guided sampling replaces optimization of the motion by one DDIM pass
whose clean estimates are nudged down the data-loss gradient.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import torch
from tqdm import tqdm

from config.schemas import RunConfig
from config.settings import Method, settings
from models.diffusion_prior import (
    DenoiserOutput, GmmDenoiser, GmmPrior, ddim_step, ddim_times, default_noise_sigma,
)
from models.global_optimizer import (
    ADAM_BETAS, ADAM_EPS, Anchor, DynamicControl, Solution, StageContext, Strategy, WindowPlan, WindowProblem,
    WindowResult, build_camera, default_stages, initialize_window, merge_windows, optimize_sequence,
    prepare_window, run_stage, sds_config_from, window_seeds,
)
from utils.errors import ConfigError, NumericalError
from utils.geometry import CameraFrames
from utils.objectives import body_joints, contact_labels, contact_term, reprojection_term
from utils.synthetic_world import ObservationSet

logger = logging.getLogger(__name__)


def run_vanilla_sds(obs: ObservationSet, prior: GmmPrior, run: RunConfig) -> Solution:
    """Staged optimization with the unconditional single-step SDS target."""
    run = run.model_copy(update={"method": Method.VANILLA_SDS, "ablations": []})
    return optimize_sequence(obs, prior, run)


def run_noise_optimization(obs: ObservationSet, prior: GmmPrior, run: RunConfig) -> Solution:
    """Staged optimization of the initial DDIM latent instead of the motion."""
    run = run.model_copy(update={"method": Method.NOISE_OPT, "ablations": []})
    return optimize_sequence(obs, prior, run)


# ---------------------------------------------------------------------------
# Guided sampling
# ---------------------------------------------------------------------------

@dataclass
class GuidanceState:
    """Camera/shape variables and the data terms evaluated by the guidance."""
    problem: WindowProblem
    prior: GmmPrior
    weights: Dict[str, float]
    huber_delta: float = 10.0

    def data_loss(self, motion: torch.Tensor, camera: CameraFrames, beta: torch.Tensor) -> torch.Tensor:
        problem = self.problem
        n = problem.n_valid
        n_joints = problem.local3d.shape[1]
        cam_v = CameraFrames(camera.rotations[:n], camera.translations[:n], camera.scale, camera.center0,
                             camera.first_rotation, camera.intrinsics)
        joints = body_joints(motion[:n], beta, n_joints)
        labels = contact_labels(motion[:n, 6 + 3 * n_joints:10 + 3 * n_joints])
        l2d = reprojection_term(joints, cam_v, problem.kp2d, problem.confidence, self.huber_delta)
        lcontact = contact_term(joints, labels, problem.body.foot_indices)
        return self.weights["l_2d"] * l2d + self.weights["l_contact"] * lcontact


def guidance_step(state: GuidanceState, denoiser: GmmDenoiser, x: torch.Tensor, t: float, t_next: float,
                  camera: CameraFrames, beta: torch.Tensor, offset: torch.Tensor,
                  scale: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    One guided DDIM step.

    The clean estimate is moved by ``-scale`` times the gradient of the data
    loss (in prior space); the noise estimate is recomputed from it only when
    guidance is active, so a zero scale reproduces the unguided step.

    Returns:
        The next latent, the guided clean estimate and the data-loss gradient
    """
    out = denoiser.denoise(x.detach(), t)
    h0 = out.h0_hat.detach().clone().requires_grad_(True)
    normalizer = state.prior.normalizer
    motion = normalizer.decode(h0, offset).reshape(state.problem.n_frames, -1)
    loss = state.data_loss(motion, camera.detach(), beta.detach())
    grad, = torch.autograd.grad(loss, h0)
    if not torch.isfinite(grad).all():
        raise NumericalError(f"non-finite guidance gradient at t={t:.4f}")
    if scale > 0.0:
        ab = denoiser.schedule.alpha_bar(t)
        guided = out.h0_hat - scale * grad
        eps = (x.detach() - float(np.sqrt(ab)) * guided) / float(np.sqrt(1.0 - ab))
        out = DenoiserOutput(guided, eps)
    return ddim_step(x.detach(), out, t, t_next, denoiser.schedule), out.h0_hat, grad


def _guided_window(obs: ObservationSet, span: Tuple[int, int], index: int, prior: GmmPrior,
                   run: RunConfig) -> WindowResult:
    plan = WindowPlan(run.optim.window_frames, run.optim.overlap, run.optim.mask_threshold)
    problem = prepare_window(obs, span, prior.n_frames, plan)
    init_seed, rng_seed, torch_seed = window_seeds(run.seed, index)
    variables, lifted_n = initialize_window(problem, prior, init_seed, run.init_mode, run.ddpm_steps)
    weights = run.effective_weights()
    stages = default_stages(run.optim.stage_steps, run.optim.stage_lrs)
    generator = torch.Generator().manual_seed(torch_seed)
    trace: List[Dict[str, object]] = []

    # camera, scale and shape against the subject held in the camera frame
    ctx = StageContext(
        problem=problem, prior=prior, weights=weights, sds=sds_config_from(run), strategy=Strategy.COIN,
        control=DynamicControl(lifted_n, problem.soft_mask.mask, default_noise_sigma(prior)),
        rng=np.random.default_rng(rng_seed), generator=generator, huber_delta=run.optim.huber_delta,
        window_index=index)
    ctx.anchor = Anchor.from_motion(variables.motion, build_camera(problem, variables), problem.local3d.shape[1])
    run_stage(variables, stages[0], ctx, trace)
    with torch.no_grad():
        variables.motion = ctx.anchor.world_motion(build_camera(problem, variables)).detach().clone()

    denoiser = GmmDenoiser(prior)
    normalizer = prior.normalizer
    offset = normalizer.horizontal_offset(variables.motion.reshape(-1)).clone()
    state = GuidanceState(problem, prior, weights.as_dict(), run.optim.huber_delta)
    camera_params = [variables.r0, variables.h0, variables.log_s, variables.beta, variables.d_rot, variables.d_trans]
    for tensor in camera_params:
        tensor.requires_grad_(True)
    optimizer = torch.optim.Adam(camera_params, lr=stages[-1].lr, betas=ADAM_BETAS, eps=ADAM_EPS)

    n_steps = max(stages[1].steps, 1)
    times = ddim_times(1.0, n_steps)
    x = torch.randn(prior.dim, generator=generator, dtype=torch.float64)
    iterator = tqdm(list(zip(times[:-1], times[1:])), desc=f"window {index} guided", disable=not settings.progress,
                    leave=False)
    for step, (t, t_next) in enumerate(iterator):
        camera = build_camera(problem, variables)
        x, h0, _ = guidance_step(state, denoiser, x, t, t_next, camera, variables.beta, offset, run.guidance_scale)
        motion = normalizer.decode(h0.detach(), offset).reshape(problem.n_frames, -1)
        optimizer.zero_grad()
        loss = state.data_loss(motion, build_camera(problem, variables), variables.beta)
        if not torch.isfinite(loss):
            raise NumericalError("non-finite data loss in guided sampling", step=step, trace=trace)
        loss.backward()
        optimizer.step()
        trace.append({"window": index, "stage": 2, "iteration": step, "t": t, "l_2d": float(loss.detach()),
                      "total": float(loss.detach()), "scale": variables.scale})

    for tensor in camera_params:
        tensor.requires_grad_(False)
    variables.motion = normalizer.decode(x.detach(), offset).reshape(problem.n_frames, -1).clone()
    camera = build_camera(problem, variables)
    n = problem.n_valid
    return WindowResult(span, variables.motion.numpy()[:n].copy(), camera.rotations.detach().numpy()[:n].copy(),
                        camera.centers().detach().numpy()[:n].copy(), variables.scale,
                        variables.beta.detach().numpy().copy(), variables.snapshot(), trace)


def run_guided_sampling(obs: ObservationSet, prior: GmmPrior, run: RunConfig) -> Solution:
    """Reconstruction guided DDIM sampling with simultaneous camera refinement."""
    run = run.model_copy(update={"method": Method.GUIDED, "ablations": []})
    if not prior.is_motion_prior:
        raise ConfigError("guided sampling needs a motion prior")
    plan = WindowPlan(run.optim.window_frames, run.optim.overlap, run.optim.mask_threshold)
    spans = plan.spans(obs.n_frames)
    logger.info(f"Guided sampling over {len(spans)} window(s), guidance scale {run.guidance_scale}")
    results = [_guided_window(obs, span, i, prior, run) for i, span in enumerate(spans)]
    return merge_windows(results, obs.n_frames, run.variant_name())


def run_method(obs: ObservationSet, prior: GmmPrior, run: RunConfig) -> Solution:
    """Dispatch on ``run.method``."""
    if run.method == Method.GUIDED:
        return run_guided_sampling(obs, prior, run)
    return optimize_sequence(obs, prior, run)
