"""Learners sharing the numeric kernel: TD3, PPO and CEM."""
