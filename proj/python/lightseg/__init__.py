"""Light dilated residual segmentation networks with a differentiable
dilation-rate search."""

from lightseg._core import (  # noqa: F401
    NetworkSpec,
    ParamStore,
    __version__,
    apply_dilations,
    benchmark,
    bilinear_upsample,
    build_network,
    conv2d,
    convert_to_dilated,
    evaluate,
    flop_count,
    gen_blobs,
    gen_planted_dilation,
    gumbel_softmax_sample,
    init_params,
    load_dataset,
    make_gated,
    mean_iou,
    num_threads,
    output_stride,
    parameter_count,
    predict,
    run_search,
    save_dataset,
    set_num_threads,
    softmax_cross_entropy,
    train,
)
