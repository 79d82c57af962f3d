"""Per-layer budget of the default detector and its ablation variants.

Run: python3 demos/budget_report.py
"""
from efayolo.analysis import analyze
from efayolo.detector import ModelConfig, build_model

model = build_model()
report = analyze(model, 640, "fp16")
print(report.to_text())
print()
print(report.to_kv())
print()

# swap the attention blocks back to plain conv / strided conv one at a time
variants = {
    "full": ModelConfig(),
    "plain downsampling": ModelConfig(use_eadown=False),
    "plain convs": ModelConfig(use_eaconv=False),
    "neither": ModelConfig(use_eaconv=False, use_eadown=False),
}
for name, cfg in variants.items():
    r = analyze(build_model(cfg), 640, "fp16")
    print(f"{name:20s} params {r.total_params / 1e6:6.2f} M   {r.flops / 1e9:6.2f} GFLOPs   {r.size_bytes / 1e6:5.2f} MB")
