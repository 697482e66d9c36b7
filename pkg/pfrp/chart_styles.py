"""
Chart styles for forecast plots.
Plotly figures share one palette and layout and are exported as standalone SVG files.
"""

from pathlib import Path

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from pfrp.utils import atomic_write_bytes

# Series colors
PFRP_COLORS = {
    'truth': '#202124',      # Dark Gray
    'global': '#4285F4',     # Blue, retrieval branch y1
    'local': '#DB4437',      # Red, local model y2
    'fused': '#0F9D58',      # Green, final forecast
    'lookback': '#9AA0A6',   # Light Gray
    'accent': '#F4B400',     # Yellow
}

# Extended palette for multi-series charts
EXTENDED_PALETTE = [
    '#4285F4', '#DB4437', '#F4B400', '#0F9D58', '#9334E6',
    '#FF6D01', '#1A73E8', '#EA4335', '#FBBC04', '#34A853',
]

CHART_TEMPLATE = {
    'gridcolor': '#F0F0F0',
    'linecolor': '#DDDDDD',
    'zerolinecolor': '#CCCCCC',
    'paper_bgcolor': '#FFFFFF',
    'plot_bgcolor': '#FFFFFF',
    'font': {
        'family': 'Roboto, Arial, sans-serif',
        'color': '#202124'
    }
}


def apply_premium_styling(fig, title=None, height=None, width=None):
    """Apply the shared layout and axis styling to a plotly figure"""
    tpl = CHART_TEMPLATE
    fig.update_layout(
        title=dict(
            text=title,
            font=dict(family="Roboto, Arial, sans-serif", size=18, color="#1E3A8A")
        ),
        font=tpl['font'],
        paper_bgcolor=tpl['paper_bgcolor'],
        plot_bgcolor=tpl['plot_bgcolor'],
        margin=dict(l=50, r=20, t=60, b=40),
        legend=dict(
            orientation="h",
            yanchor="bottom",
            y=1.02,
            xanchor="center",
            x=0.5,
            font=dict(size=12)
        ),
        height=height,
        width=width,
    )

    axis_style = dict(
        showgrid=True,
        gridwidth=1,
        gridcolor=tpl['gridcolor'],
        zeroline=True,
        zerolinewidth=1,
        zerolinecolor=tpl['zerolinecolor'],
        showline=True,
        linewidth=1,
        linecolor=tpl['linecolor'],
        tickfont=dict(size=10)
    )
    fig.update_xaxes(**axis_style)
    fig.update_yaxes(**axis_style)
    return fig


def create_forecast_chart(y_true, y1, y2, y, lookback=None, title=None, height=420, width=900):
    """Ground truth against the global, local and fused forecasts for one window"""
    fig = go.Figure()
    offset = 0
    if lookback is not None:
        lookback = np.asarray(lookback, dtype=np.float64)
        offset = lookback.size
        fig.add_trace(go.Scatter(x=np.arange(offset), y=lookback, mode="lines", name="lookback",
                                 line=dict(color=PFRP_COLORS['lookback'], width=1.5)))
    steps = np.arange(offset, offset + len(y_true))
    series = [
        ("ground truth", y_true, PFRP_COLORS['truth'], None),
        ("global (y1)", y1, PFRP_COLORS['global'], "dot"),
        ("local (y2)", y2, PFRP_COLORS['local'], "dot"),
        ("forecast (y)", y, PFRP_COLORS['fused'], None),
    ]
    for name, values, color, dash in series:
        fig.add_trace(go.Scatter(x=steps, y=np.asarray(values, dtype=np.float64), mode="lines", name=name,
                                 line=dict(color=color, width=2, dash=dash)))
    fig.update_xaxes(title_text="step")
    return apply_premium_styling(fig, title=title, height=height, width=width)


def create_line_chart(df, x, y, title=None, color=None, height=400, width=800):
    """Line chart of one or more columns (loss curves, sweeps)"""
    fig = px.line(df, x=x, y=y, color=color, markers=True, color_discrete_sequence=EXTENDED_PALETTE)
    return apply_premium_styling(fig, title=title, height=height, width=width)


def create_scatter_chart(df, x, y, title=None, color=None, height=400, width=800):
    fig = px.scatter(df, x=x, y=y, color=color, color_discrete_sequence=[PFRP_COLORS['global']])
    fig.update_traces(marker=dict(size=6, opacity=0.8, line=dict(width=1, color='white')))
    return apply_premium_styling(fig, title=title, height=height, width=width)


def write_svg(fig, path):
    """Render a figure to SVG (kaleido) and write it atomically"""
    return atomic_write_bytes(Path(path), fig.to_image(format="svg"))


def loss_frame(loss_curve, label="loss"):
    return pd.DataFrame({"epoch": np.arange(len(loss_curve)), label: loss_curve})
