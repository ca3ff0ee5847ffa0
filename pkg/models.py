from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String, Text

from app import Base


class StageRun(Base):
    __tablename__ = "stage_run"

    id = Column(Integer, primary_key=True)
    stage = Column(String(100), nullable=False, index=True)
    digest = Column(String(64), nullable=False)
    status = Column(String(20), nullable=False)  # running | success | error
    artifact = Column(Text)
    records_processed = Column(Integer, default=0)
    error_message = Column(Text)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime)

    def __repr__(self):
        return f'<StageRun {self.stage} - {self.status}>'


class ProcessingLog(Base):
    __tablename__ = "processing_log"

    id = Column(Integer, primary_key=True)
    filename = Column(String(500), nullable=False)
    status = Column(String(50), nullable=False)
    records_processed = Column(Integer, default=0)
    error_message = Column(Text)
    processed_at = Column(DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f'<ProcessingLog {self.filename} - {self.status}>'
