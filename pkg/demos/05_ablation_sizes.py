"""How the interaction modules grow with the number of tasks, and what each ablation removes."""

from dataclasses import replace

from bridgenet import BridgeNet, ModelConfig

base = ModelConfig(image_size=64, channels=32)
tasks = ("seg", "depth", "normals", "edges")

print("tasks  tpp      bfe      tfr      total")
for t in range(1, 5):
    c = BridgeNet(replace(base, tasks=tasks[:t])).interaction_parameters()
    print(f"{t:5d}  {c['tpp']:7d}  {c['bfe']:7d}  {c['tfr']:7d}  {sum(c.values()):7d}")
# The feature bridge is shared, so its size stays put; the other two grow by a fixed step.

print()
none = base.baseline()
for label, cfg in [
    ("baseline", none),
    ("+bfe", replace(none, use_bfe=True)),
    ("+bfe+tpp", replace(none, use_bfe=True, use_tpp=True)),
    ("full", base),
]:
    print(f"{label:10s} {BridgeNet(cfg).num_parameters():8d} parameters")
