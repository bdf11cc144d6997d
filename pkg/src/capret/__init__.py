"""Caption-and-retrieve toolkit.

A frozen vision encoder and a frozen causal language decoder are bridged by
trainable linear projections and a special retrieval token.  The bridge is
trained jointly for image captioning and text-to-image retrieval; everything
else (data handling, metrics, CLI, HTTP service) supports that loop.
"""

__version__ = "0.1.0"
