"""
Task-Aware MoE Test Suite

Covers the autodiff core, routing, the MoE layer, two-stage training and the experiment runners
"""
