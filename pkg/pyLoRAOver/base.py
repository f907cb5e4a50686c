import copy
import logging

from .exceptions import ConfigError


class CalculatedMixin:
    """Mixin for classes that have calculated parameters"""

    def __init__(self, *args, **kwargs):
        self._calculated = False
        super().__init__(*args, **kwargs)

    def calculate(self):
        self._calculated = True


class ConfigEntity:
    """
    Defines a base class for all configuration sections

    It defines a set of variables common to all configuration sections that
    should be redefined by each subclass:

        section : str
            Name of the section in the run configuration file.
            Example: 'train', 'lora'...

        parameters : list of str
            List of the parameters that define the section
            Example: ['rank', 'alpha'] for LoraConfig

        paramdefaults : list of values
            Default values for the parameters defined in parameters
            Example: [4, 4.0] for LoraConfig

    Every parameter is exposed as a property whose setter validates the value
    and raises ParameterInvalid.
    """
    section = ''
    parameters = []
    paramdefaults = []

    def __init__(self, **kwargs):
        unknown = [key for key in kwargs if key not in self.parameters]
        if unknown:
            raise ConfigError(f'Unknown parameter(s) for section "{self.section}": {", ".join(sorted(unknown))}.')
        # Initialize parameters with keywords or default values
        for param, default in zip(self.parameters, self.paramdefaults):
            if param in kwargs:
                setattr(self, f'{param}', kwargs.pop(param))
            else:
                setattr(self, f'_{param}', copy.deepcopy(default))
        self.check()

    def __repr__(self):
        return f'{self.__class__.__name__}(' + ', '.join(f'{p}={getattr(self, p)!r}' for p in self.parameters) + ')'

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    __hash__ = None

    def check(self):
        """Cross-parameter validation, redefined by subclasses"""
        pass

    def to_dict(self):
        return {p: copy.deepcopy(getattr(self, p)) for p in self.parameters}

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        if not isinstance(d, dict):
            raise ConfigError(f'Section "{cls.section}" should be an object, got {type(d).__name__}.')
        logging.getLogger('LoRAOver').debug(f'Building section "{cls.section}" from {sorted(d)}')
        return cls(**d)
