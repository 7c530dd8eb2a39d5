import math
from abc import ABC, abstractmethod
from pathlib import Path

import bokeh
import jinja2

from meshmotion import logger
from meshmotion.config import THIS_DIR


def fmt(value, digits=4):
    """Number formatting shared by the text and HTML templates"""
    if value is None:
        return '-'
    if isinstance(value, float):
        if math.isnan(value):
            return '-'
        return f'{value:.{digits}f}'
    return str(value)


class Formatter(ABC):
    def __init__(self):
        self.output = None
        self.params = None

    @abstractmethod
    def render(self):
        raise NotImplementedError("render implementation not found")


class BaseFormatter(Formatter):
    """
    Renders a jinja2 template from the packaged resources into
    ``filepath``.

    Parameters
    ----------
    filepath : str or Path
        file to be written
    template_file : str
        template name inside the resources folder
    """

    def __init__(self, filepath, template_file=None):
        super(BaseFormatter, self).__init__()
        self.filepath = Path(filepath)
        self.template_folder = THIS_DIR / 'resources'
        self.template_file = template_file
        self.results = None
        self.skip_report = False

    def collect_results(self, report, **kwargs):
        """
        Stores an EvalReport and any extra values for the template.

        Parameters
        ----------
        report : EvalReport
            scores to render
        kwargs : dict
            Additional arguments to pass to the jinja2 template
        """
        if not (report.assets or report.ablation):
            logger.error('Report has neither asset scores nor ablation rows.'
                         ' Skipping report')
            self.skip_report = True
        self.results = {'report': report}
        for key, value in kwargs.items():
            self.results[key] = value

    def _environment(self):
        fs_loader = jinja2.FileSystemLoader(searchpath=self.template_folder)
        extn = ['jinja2.ext.loopcontrols']
        env = jinja2.Environment(loader=fs_loader, extensions=extn,
                                 trim_blocks=True, lstrip_blocks=True,
                                 keep_trailing_newline=True)
        env.filters['fmt'] = fmt
        return env

    def render(self, **kwargs):
        """Writes the rendered template, returns the path or None"""
        if self.skip_report:
            logger.error('Cannot generate report. See error log for details')
            return None
        template = self._environment().get_template(self.template_file)
        self.output = template.render(skip_report=self.skip_report,
                                      **(self.results or {}), **kwargs)
        self.filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(self.filepath, 'w') as f:
            f.write(self.output)
        return self.filepath


class TextFormatter(BaseFormatter):
    """Plain text tables of per-asset scores and ablation rows"""

    def __init__(self, filepath):
        super(TextFormatter, self).__init__(filepath, 'report.txt.jinja')


class HtmlFormatter(BaseFormatter):
    """
    HTML report with the score tables and embedded bokeh figures.

    Parameters
    ----------
    filepath : str
        Path to the html file to be created
    render : bool
        If True, the report is rendered immediately. Otherwise, the render
        method needs to be called explicitly.
    """

    def __init__(self, filepath, render=False):
        super(HtmlFormatter, self).__init__(filepath, 'layout.html')
        self.plots = {}
        self.skip_plots = True
        if render:
            self.render()

    def collect_plots(self, **kwargs):
        for key, value in kwargs.items():
            self.plots[key] = value

        if not self.plots:
            logger.warning('No plots found. Skipping plots section in report')
            self.skip_plots = True
        else:
            self.skip_plots = False

    def render(self, **kwargs):
        return super().render(plots=self.plots, skip_plots=self.skip_plots,
                              bokeh_version=bokeh.__version__, **kwargs)


class TrainingFormatter(HtmlFormatter):
    """
    HTML page of one training run: loss curves, evaluation checkpoints
    and the configuration the run was trained with.
    """

    def __init__(self, filepath):
        super(TrainingFormatter, self).__init__(filepath)
        self.template_file = 'training.html'

    def collect_results(self, history, stage='training', config=None,
                        **kwargs):
        """
        Parameters
        ----------
        history : list of dict
            metrics log records with ``kind`` train or eval
        stage : str
            name shown in the title
        config : list of (str, str)
            configuration records echoed at the bottom
        """
        if not history:
            logger.error('Training history is empty. Skipping report')
            self.skip_report = True
        self.results = {'stage': stage, 'config': config or [],
                        'train_steps': sum(r.get('kind') == 'train'
                                           for r in history),
                        'evals': [r for r in history
                                  if r.get('kind') == 'eval'],
                        **kwargs}
