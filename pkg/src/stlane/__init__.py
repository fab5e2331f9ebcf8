"""stlane: sequence-to-one lane detection at desk scale.

An SCNN-augmented encoder, a ConvLSTM/ConvGRU spatial-temporal block and a
UNet/SegNet-style decoder, built on a self-contained reverse-mode rank-4
tensor core, plus the training/evaluation harness, synthetic scene generator
and analytic model-complexity reporting that go with them.
"""

__version__ = "0.1.0"
