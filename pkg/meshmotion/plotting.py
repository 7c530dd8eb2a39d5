from abc import ABC, abstractmethod
from collections import defaultdict

from bokeh.embed import components
from bokeh.palettes import d3, turbo
from bokeh.plotting import figure

from meshmotion import logger


class BasePlot(ABC):
    """Bokeh figure rendered to the (div, script) pair of a report"""
    _name = None

    def __init__(self, name=None, y_axis_label=None, x_axis_label=None,
                 plot_height=300, plot_width=800, line_width=2):
        if name is not None:
            self._name = name
        self.div = None
        self.script = None
        self.plot_height = plot_height
        self.plot_width = plot_width
        self.x_axis_label = x_axis_label
        self.y_axis_label = y_axis_label
        self.line_width = line_width
        self.colors = None

    @property
    def name(self):
        return self._name

    @abstractmethod
    def compute_series(self, records):
        """Groups records into label -> {'x': [...], 'y': [...]}"""

    @abstractmethod
    def plot(self, records):
        """Creates a plot for the given records"""

    def set_cmap(self, length):
        """Sets the color map for the plot"""
        if length > 10:
            colors = turbo(length)
        else:
            palette = d3['Category10']
            if length > 3:
                colors = palette[length]
            else:
                colors = palette[10][:length]
        self.colors = colors

    def get_plot_components(self, series):
        self.set_cmap(max(len(series), 1))
        p = figure(x_axis_label=self.x_axis_label,
                   y_axis_label=self.y_axis_label,
                   width=self.plot_width, height=self.plot_height)
        for i, (label, data) in enumerate(series.items()):
            p.line(x=data['x'], y=data['y'], line_width=self.line_width,
                   line_alpha=0.9, color=self.colors[i],
                   legend_label=str(label))
        p.xgrid.grid_line_color = None
        p.ygrid.grid_line_alpha = 0.5
        if series:
            p.legend.click_policy = 'hide'
            p.add_layout(p.legend[0], 'below')
        return components(p)


class FrameMetricPlot(BasePlot):
    """One line per asset: a metric over time"""
    _name = 'frame_metric'

    def __init__(self, metric, **kwargs):
        super().__init__(name=f'{metric}_per_frame', y_axis_label=metric,
                         x_axis_label='frame', **kwargs)
        self.metric = metric

    def compute_series(self, records):
        series = defaultdict(lambda: {'x': [], 'y': []})
        for record in records:
            series[record['asset']]['x'].append(int(record['t']))
            series[record['asset']]['y'].append(float(record[self.metric]))
        return dict(series)

    def plot(self, records):
        series = self.compute_series(records)
        if not series:
            logger.warning(f'No frame records to plot for {self.metric}')
        self.div, self.script = self.get_plot_components(series)


class LossCurvePlot(BasePlot):
    """Values of one record kind over steps, read from a metrics log"""
    _name = 'loss_curve'

    def __init__(self, keys=('total',), kind='train', y_axis_label='loss',
                 **kwargs):
        super().__init__(y_axis_label=y_axis_label, x_axis_label='step',
                         **kwargs)
        self.keys = tuple(keys)
        self.kind = kind

    def compute_series(self, records):
        series = {key: {'x': [], 'y': []} for key in self.keys}
        for record in records:
            if record.get('kind', 'train') != self.kind:
                continue
            for key in self.keys:
                if key in record:
                    series[key]['x'].append(int(record['step']))
                    series[key]['y'].append(float(record[key]))
        return {k: v for k, v in series.items() if v['x']}

    def plot(self, records):
        series = self.compute_series(records)
        if not series:
            logger.warning(f'No {self.kind} records to plot')
        self.div, self.script = self.get_plot_components(series)
