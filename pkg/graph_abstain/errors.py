class GraphAbstainError(ValueError):
    pass


class ParseError(GraphAbstainError):

    def __init__(self, message, path=None, line_number=None):
        self.path = path
        self.line_number = line_number
        location = ''
        if path is not None:
            location = f'{path}:'
        if line_number is not None:
            location = f'{location}{line_number}: '
        elif location:
            location = f'{location} '
        super().__init__(f'{location}{message}')


class DimensionError(GraphAbstainError):
    pass


class EmptyDatasetError(GraphAbstainError):
    pass


class CapacityError(GraphAbstainError):

    def __init__(self, message, label=None):
        self.label = label
        super().__init__(message)


class ParameterError(GraphAbstainError):
    pass


class DataError(GraphAbstainError):
    pass


class ContractError(GraphAbstainError):
    pass


class NumericFaultError(GraphAbstainError):

    def __init__(self, message, term=None, epoch=None):
        self.term = term
        self.epoch = epoch
        super().__init__(message)


class CalibrationError(GraphAbstainError):
    pass
