"""Continual distillation core: autodiff, models, prompt pools, distillation and the continual harness"""
