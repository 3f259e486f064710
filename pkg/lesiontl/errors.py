class LesionTLError(Exception):
    """
        Base of every error lesiontl raises on purpose. `exit_code` is what the CLI exits with.
    """
    exit_code = 1


class ConfigError(LesionTLError):
    """
        Raised when configuration fails to validate.

        Either built from a single (variable_name, error_message) pair, or from an error_dict mapping every
        violated field to a list of messages, so that all problems can be reported at once.
    """
    exit_code = 2

    def __init__(self, variable_name, error_message=None):
        if isinstance(variable_name, dict):
            self.error_dict = dict(variable_name)
            self.variable_name = None
            self.error_message = None
            message = '; '.join('%s: %s' % (k, ', '.join(v)) for k, v in sorted(self.error_dict.items()))

        else:
            self.error_dict = {variable_name: [error_message]} if error_message else {}
            self.variable_name = variable_name
            self.error_message = error_message
            message = '%s: %s' % (variable_name, error_message) if error_message else str(variable_name)

        super(ConfigError, self).__init__(message)

    def __repr__(self):
        if self.error_dict:
            return '<%s: %r>' % (self.__class__.__name__, self.error_dict)

        return '<%s: %s, %s>' % (self.__class__.__name__, self.variable_name, self.error_message)


class SpecError(ConfigError):
    pass


class FreezePolicyError(SpecError):
    pass


class AblationError(LesionTLError):
    exit_code = 2


class DatasetError(LesionTLError):
    exit_code = 3


class DatasetStructureError(DatasetError):
    pass


class EmptyClassError(DatasetError):
    def __init__(self, label):
        self.label = label
        super(EmptyClassError, self).__init__('No usable images for class %s' % label)


class StratificationError(DatasetError):
    pass


class InsufficientDataError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    def __init__(self, path, reason):
        self.path = path
        self.reason = reason
        super(ImageDecodeError, self).__init__('Could not decode %s: %s' % (path, reason))


class WeightLoadError(LesionTLError):
    # Missing inputs share the dataset exit code.
    exit_code = 3


class DivergenceError(LesionTLError):
    """
        Training produced a non-finite loss.
    """
    exit_code = 4

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super(DivergenceError, self).__init__('Non-finite loss %r at epoch %d' % (loss, epoch))


class ShapeError(LesionTLError):
    pass


class UndefinedMetricError(LesionTLError):
    def __init__(self, metric, reason):
        self.metric = metric
        super(UndefinedMetricError, self).__init__('%s is undefined: %s' % (metric, reason))


class SchemaError(LesionTLError):
    pass


class PlotError(LesionTLError):
    pass


class SuiteError(LesionTLError):
    """
        Some members of a suite failed. Partial artifacts have been written.
    """
    exit_code = 5

    def __init__(self, failed, artifacts=None):
        self.failed = dict(failed)
        self.artifacts = artifacts
        super(SuiteError, self).__init__('%d suite member(s) failed: %s' % (
            len(self.failed), ', '.join(sorted(self.failed))))
