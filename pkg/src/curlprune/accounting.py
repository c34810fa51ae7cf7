"""MACs and parameter counts for convolutional graphs.

Conv MACs are ``out_h * out_w * out_c * (in_c / groups) * kh * kw``; the
classifier adds ``in * out``. Parameters count weights, biases and the BN
affine pair (gamma, beta); running statistics are buffers, not parameters.
"""

from __future__ import annotations

from .nn import ConvLayer, LinearLayer, NetworkGraph


def conv_macs(in_channels, out_channels, kernel, out_hw, groups=1) -> int:
    oh, ow = out_hw
    return int(oh * ow * out_channels * (in_channels // groups) * kernel * kernel)


def conv_params(in_channels, out_channels, kernel, groups=1, bias=False) -> int:
    return int(out_channels * (in_channels // groups) * kernel * kernel + (out_channels if bias else 0))


def count_macs_params(obj, input_hw=None) -> tuple[int, int]:
    """(macs, params) for a NetworkGraph, or for a single ConvLayer/LinearLayer.

    A lone ConvLayer needs ``input_hw``; inside a graph the resolution is traced.
    """
    if isinstance(obj, ConvLayer):
        if input_hw is None:
            raise ValueError("count_macs_params: a single conv layer needs input_hw")
        out_hw = obj.out_hw(*input_hw)
        return (conv_macs(obj.in_channels, obj.out_channels, obj.kernel_size, out_hw, obj.groups),
                conv_params(obj.in_channels, obj.out_channels, obj.kernel_size, obj.groups, obj.bias is not None))
    if isinstance(obj, LinearLayer):
        fin, fout = obj.weight.shape
        return fin * fout, fin * fout + fout
    if isinstance(obj, NetworkGraph):
        return macs_for_widths(obj, obj.space_widths())
    raise TypeError(f"count_macs_params: unsupported object {type(obj).__name__}")


def macs_for_widths(net: NetworkGraph, widths: dict) -> tuple[int, int]:
    """(macs, params) the graph would have if its channel spaces had ``widths``.

    Used by the planner to price removals without rebuilding the network.
    """
    macs = params = 0
    for conv, _, out_hw in net.conv_geometry():
        cin = net.config.in_channels if conv.in_space == "input" else widths[conv.in_space]
        cout = widths[conv.out_space]
        groups = cin if conv.depthwise else conv.groups
        macs += conv_macs(cin, cout, conv.kernel_size, out_hw, groups)
        params += conv_params(cin, cout, conv.kernel_size, groups, conv.bias is not None)
        params += 2 * cout  # BN gamma, beta
    fin, fout = widths[net.fc.in_space], net.class_count
    macs += fin * fout
    params += fin * fout + fout
    return int(macs), int(params)
