"""quadcd_adapter: bridges a vision-language model and a segmenter to the
quadcd backend wire protocol.

The adapter owns everything the decoding engine deliberately does not:
images, segmentation, masking, and model forward passes.  Per session it
resolves the requested image, segments it exactly once, builds the dual,
residual and non-visual conditioning contexts, and then answers each step
request with four logit vectors over the model's tokenizer vocabulary.
"""

__version__ = "0.1.0"
