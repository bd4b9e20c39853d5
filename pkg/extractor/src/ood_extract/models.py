"""Model loading and penultimate-activation capture."""
from __future__ import annotations

from pathlib import Path

import torch
from torch import nn
from torchvision.models import get_model
from torchvision.models.vision_transformer import VisionTransformer


class ExtractError(RuntimeError):
    pass


def resolve_model(spec: str, weights: str | None) -> nn.Module:
    """A torchvision model name, or a path to a torch.save()d module.

    With a name, --weights may be 'default' (the pretrained torchvision
    weights, needs network access) or a path to a state dict.
    """
    path = Path(spec)
    if path.suffix in {".pt", ".pth"}:
        if weights is not None:
            raise ExtractError("--weights only applies to model names")
        try:
            model = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError) as exc:
            raise ExtractError(f"cannot load module from {path}: {exc}") from exc
        if not isinstance(model, nn.Module):
            raise ExtractError(f"{path} does not contain an nn.Module")
        return model

    try:
        model = get_model(spec, weights="DEFAULT" if weights == "default" else None)
    except (ValueError, KeyError) as exc:
        raise ExtractError(f"unknown model {spec!r}: {exc}") from exc
    if weights is not None and weights != "default":
        try:
            state = torch.load(weights, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as exc:
            raise ExtractError(f"cannot load weights {weights}: {exc}") from exc
        model = _match_head_width(spec, model, state)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise ExtractError(f"cannot load weights {weights}: {exc}") from exc
    return model


def _match_head_width(spec: str, model: nn.Module, state: dict) -> nn.Module:
    """Rebuild with the checkpoint's class count when the head width differs."""
    name = None
    for n, module in model.named_modules():
        if isinstance(module, nn.Linear):
            name = n
    if name is None:
        return model
    saved = state.get(f"{name}.weight")
    if saved is None or saved.ndim != 2:
        return model
    current: nn.Linear = dict(model.named_modules())[name]
    if saved.shape[0] != current.out_features:
        return get_model(spec, weights=None, num_classes=int(saved.shape[0]))
    return model


def find_linear_head(model: nn.Module) -> nn.Linear:
    """The last nn.Linear in module order is taken as the classification head."""
    head = None
    for module in model.modules():
        if isinstance(module, nn.Linear):
            head = module
    if head is None:
        raise ExtractError("model has no linear classification head")
    return head


def head_arrays(head: nn.Linear):
    weight = head.weight.detach().cpu().numpy()
    if head.bias is not None:
        bias = head.bias.detach().cpu().numpy()
    else:
        bias = weight[:, 0] * 0.0
    return weight, bias


def _pool_tokens(tokens: torch.Tensor, pool: str) -> torch.Tensor:
    if pool == "cls":
        return tokens[:, 0]
    if pool == "mean":
        return tokens.mean(dim=1)
    raise ExtractError(
        "transformer backbone: the penultimate activation is ambiguous, "
        "pass --pool cls or --pool mean"
    )


def capture(model: nn.Module, batch: torch.Tensor, pool: str):
    """Run one batch and return (features, logits) tensors.

    Standard models: features are the input of the last linear layer, logits
    its output. Token backbones (3-d head input, or a torchvision
    VisionTransformer): features are the pooled tokens per --pool, and the
    logits are recomputed from that pooled feature so the dump stays
    self-consistent.
    """
    head = find_linear_head(model)
    grabbed: dict[str, torch.Tensor] = {}

    if isinstance(model, VisionTransformer):
        if pool == "auto":
            _pool_tokens(torch.empty(0), pool)  # raises with the guidance

        def encoder_hook(module, inputs, output):
            grabbed["tokens"] = output.detach()

        handle = model.encoder.register_forward_hook(encoder_hook)
        try:
            with torch.inference_mode():
                model(batch)
                feats = _pool_tokens(grabbed["tokens"], pool)
                logits = torch.nn.functional.linear(feats, head.weight, head.bias)
        finally:
            handle.remove()
        # clones outside inference mode are ordinary tensors again
        return feats.clone(), logits.clone()

    def head_hook(module, inputs, output):
        grabbed["features"] = inputs[0].detach()
        grabbed["logits"] = output.detach()

    handle = head.register_forward_hook(head_hook)
    try:
        with torch.inference_mode():
            model(batch)
            feats = grabbed["features"]
            logits = grabbed["logits"]
            if feats.ndim == 3:
                feats = _pool_tokens(feats, pool)
                logits = torch.nn.functional.linear(
                    feats, head.weight, head.bias
                )
    finally:
        handle.remove()

    if feats.ndim != 2:
        raise ExtractError(f"head input has unsupported shape {tuple(feats.shape)}")
    return feats.clone(), logits.clone()
