class HtpsError(Exception):
    pass


class ValidationError(HtpsError, ValueError):
    '''Bad input: config keys, files, rows, or shapes handed to a public API.'''


class CheckpointError(ValidationError):
    pass


class TrainingDiverged(HtpsError, RuntimeError):

    def __init__(self, epoch: int, loss: float):
        super().__init__(f'training diverged at epoch {epoch} (loss {loss})')
        self.epoch = epoch
        self.loss = loss
