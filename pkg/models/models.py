import json

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, func
from sqlalchemy.orm import relationship

from database import Base


class RunRecord(Base):
    __tablename__ = 'run_record'

    id = Column(Integer, primary_key=True)
    timestamp = Column(DateTime, default=func.current_timestamp())
    command = Column(String, nullable=False)  # cv, train, eval, ablate
    config_hash = Column(String, nullable=False)
    seed = Column(Integer)
    data_dir = Column(String)
    out_dir = Column(String)
    accuracy = Column(Float)
    recall = Column(Float)
    f1 = Column(Float)
    accuracy_sd = Column(Float)
    extra = Column(Text)  # JSON string, e.g. masked-eval summaries

    folds = relationship('FoldResult', back_populates='run', cascade='all, delete-orphan',
                         order_by='FoldResult.fold')
    features = relationship('SelectedFeature', back_populates='run', cascade='all, delete-orphan')

    def to_dict(self):
        return {
            "id": self.id,
            "timestamp": self.timestamp.isoformat() if self.timestamp else None,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "accuracy": self.accuracy,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy_sd": self.accuracy_sd,
            "extra": json.loads(self.extra) if self.extra else {},
            "folds": [f.to_dict() for f in self.folds],
        }


class FoldResult(Base):
    __tablename__ = 'fold_result'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('run_record.id'), nullable=False)
    fold = Column(Integer, nullable=False)
    accuracy = Column(Float)
    recall = Column(Float)
    f1 = Column(Float)
    best_epoch = Column(Integer)
    stopped_epoch = Column(Integer)

    run = relationship('RunRecord', back_populates='folds')

    def to_dict(self):
        return {
            "fold": self.fold,
            "accuracy": self.accuracy,
            "recall": self.recall,
            "f1": self.f1,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


class SelectedFeature(Base):
    __tablename__ = 'selected_feature'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('run_record.id'), nullable=False)
    fold = Column(Integer)  # None for a full-data train run
    modality = Column(String)
    name = Column(String)
    rank = Column(Integer)

    run = relationship('RunRecord', back_populates='features')
