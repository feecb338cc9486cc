"""
Prompt parameter and compute budget
===================================

Closed-form prompt cost for a ViT-B/32 student, then the same overhead
measured by counting multiply-adds in the toy encoder's forward pass.
"""

from fractions import Fraction

from protodistill.complexity import PromptBudget, attention_overhead, budget_report, mlp_overhead
from protodistill.student import ToyEncoderConfig, count_multiply_adds

rep = budget_report(PromptBudget.vit_b32())
print(f"prompt parameters: {rep['prompt_params']:,} "
      f"({100 * rep['param_fraction']:.3f}% of an {rep['budget']['backbone_params']:,}-parameter backbone)")
for branch in ("vision", "text"):
    o = rep[branch]
    print(f"{branch:6s} attention +{100 * o['attention_overhead']:.1f}%   mlp +{100 * o['mlp_overhead']:.1f}%")

# the attention overhead is a ratio of sequence lengths squared
print(f"\nexact vision attention overhead: {attention_overhead(49, 8, exact=True)}")

# measured: run the toy encoder with and without prompts and compare counts
print("\n   N   P   measured attn   closed form    measured mlp")
for n, p in [(49, 8), (77, 4), (16, 4), (4, 2)]:
    base = count_multiply_adds(ToyEncoderConfig(dim=8, seq_len=n, prompt_tokens=0, layers=2))
    ext = count_multiply_adds(ToyEncoderConfig(dim=8, seq_len=n, prompt_tokens=p, layers=2))
    attn = Fraction(ext.attention - base.attention, base.attention)
    mlp = Fraction(ext.mlp - base.mlp, base.mlp)
    print(f"{n:4d} {p:3d}   {float(attn):13.6f}   {attention_overhead(n, p):11.6f}   {float(mlp):13.6f}"
          f"{'' if mlp == mlp_overhead(n, p, exact=True) else '  (mismatch)'}")
