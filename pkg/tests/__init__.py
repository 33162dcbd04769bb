"""Tests for pet-joint-diffusion."""
